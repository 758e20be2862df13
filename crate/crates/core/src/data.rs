//! Graph datasets on disk.
//!
//! A dataset directory holds four tab-separated files and a manifest:
//!
//! * `features.tsv`: `node_id` then `F` reals, one node per line, ids `0..N-1` in order
//! * `edges.tsv`: two node ids per line, one undirected edge
//! * `labels.tsv`: `node_id`, integer label
//! * `splits.tsv`: `node_id`, one of `train`, `val`, `test`, `none`
//! * `manifest.toml`: name, class count, preprocessing flags, and the relative
//!   path and SHA-256 of every file
//!
//! Reals are written in shortest round-trip form, so writing and reloading a
//! dataset is exact.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Pattern, Tensor};
use crate::error::{BamError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
    None,
}

impl SplitTag {
    fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
            SplitTag::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphDataset {
    pub name: String,
    /// Raw features, `N×F`.
    pub features: Tensor,
    /// Undirected edges as listed in the source; self-loops are added when
    /// the attention support is built.
    pub edges: Vec<(usize, usize)>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub splits: Vec<SplitTag>,
    pub row_normalize: bool,
}

/// Reference sizes of the public citation benchmarks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReferenceStats {
    pub nodes: usize,
    pub edges: usize,
    pub features: usize,
    pub classes: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

pub fn reference_stats(name: &str) -> Option<ReferenceStats> {
    let s = |nodes, edges, features, classes, train| ReferenceStats {
        nodes,
        edges,
        features,
        classes,
        train,
        val: 500,
        test: 1000,
    };
    match name.to_ascii_lowercase().as_str() {
        "cora" => Some(s(2708, 5429, 1433, 7, 140)),
        "citeseer" => Some(s(3327, 4732, 3703, 6, 120)),
        "pubmed" => Some(s(19717, 44338, 500, 3, 60)),
        _ => None,
    }
}

impl GraphDataset {
    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn split_nodes(&self, split: SplitTag) -> Vec<usize> {
        (0..self.num_nodes()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Structural checks that hold for every valid dataset.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        if self.labels.len() != n || self.splits.len() != n {
            return Err(BamError::Validation(format!(
                "{n} nodes but {} labels and {} split tags",
                self.labels.len(),
                self.splits.len()
            )));
        }
        if let Some(&(a, b)) = self.edges.iter().find(|&&(a, b)| a >= n || b >= n) {
            return Err(BamError::Validation(format!("edge ({a}, {b}) leaves the {n}-node graph")));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(BamError::Validation(format!("label {l} with only {} classes", self.classes)));
        }
        Ok(())
    }

    /// For the named benchmarks, node, feature, class and split counts must
    /// equal the published statistics.
    pub fn validate_reference(&self) -> Result<()> {
        let Some(r) = reference_stats(&self.name) else {
            return Ok(());
        };
        let found = [
            ("nodes", self.num_nodes(), r.nodes),
            ("features", self.num_features(), r.features),
            ("classes", self.classes, r.classes),
            ("train nodes", self.split_nodes(SplitTag::Train).len(), r.train),
            ("validation nodes", self.split_nodes(SplitTag::Val).len(), r.val),
            ("test nodes", self.split_nodes(SplitTag::Test).len(), r.test),
        ];
        for (what, got, want) in found {
            if got != want {
                return Err(BamError::Validation(format!(
                    "{}: expected {want} {what}, found {got}",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// Features after the preprocessing recorded in the manifest: each row
    /// divided by its sum when `row_normalize` is set (all-zero rows stay zero).
    pub fn model_features(&self) -> Tensor {
        let mut out = self.features.clone();
        if self.row_normalize {
            let cols = out.cols();
            for row in out.data_mut().chunks_mut(cols) {
                let s: f64 = row.iter().sum();
                if s != 0.0 {
                    row.iter_mut().for_each(|x| *x /= s);
                }
            }
        }
        out
    }

    /// Attention support: both directions of every edge plus a self-loop at
    /// every node.
    pub fn attention_pattern(&self) -> Result<Pattern> {
        let n = self.num_nodes();
        let entries = self
            .edges
            .iter()
            .flat_map(|&(a, b)| [(a, b), (b, a)])
            .chain((0..n).map(|i| (i, i)));
        Pattern::from_entries(n, n, entries)
    }

    /// Up to `size` nodes in breadth-first order from `start`, taking
    /// neighbours in ascending id order. When the reachable set is smaller,
    /// the remaining nodes follow in id order.
    pub fn neighbourhood(&self, start: &[usize], size: usize) -> Result<Vec<usize>> {
        let n = self.num_nodes();
        let size = size.min(n);
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b) in &self.edges {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }
        let mut taken = vec![false; n];
        let mut order = Vec::with_capacity(size);
        let mut queue = std::collections::VecDeque::new();
        for &v in start {
            if v >= n {
                return Err(BamError::Validation(format!("start node {v} is out of range")));
            }
            if !taken[v] && order.len() < size {
                taken[v] = true;
                order.push(v);
                queue.push_back(v);
            }
        }
        while let Some(v) = queue.pop_front() {
            for &u in &adjacency[v] {
                if order.len() == size {
                    return Ok(order);
                }
                if !taken[u] {
                    taken[u] = true;
                    order.push(u);
                    queue.push_back(u);
                }
            }
        }
        order.extend((0..n).filter(|&v| !taken[v]).take(size - order.len()));
        Ok(order)
    }

    /// The subgraph induced by `nodes`, relabeled `0..nodes.len()-1` in the
    /// given order. Split tags and labels travel with their nodes.
    pub fn induced_subgraph(&self, nodes: &[usize], name: &str) -> Result<GraphDataset> {
        let n = self.num_nodes();
        let mut new_id = vec![usize::MAX; n];
        for (i, &v) in nodes.iter().enumerate() {
            if v >= n || new_id[v] != usize::MAX {
                return Err(BamError::Validation(format!("node {v} is out of range or repeated")));
            }
            new_id[v] = i;
        }
        let f = self.num_features();
        let mut feats = Vec::with_capacity(nodes.len() * f);
        for &v in nodes {
            feats.extend_from_slice(self.features.row(v));
        }
        let edges = self
            .edges
            .iter()
            .filter(|&&(a, b)| new_id[a] != usize::MAX && new_id[b] != usize::MAX)
            .map(|&(a, b)| (new_id[a], new_id[b]))
            .collect();
        Ok(GraphDataset {
            name: name.to_string(),
            features: Tensor::matrix(nodes.len(), f, feats)?,
            edges,
            labels: nodes.iter().map(|&v| self.labels[v]).collect(),
            classes: self.classes,
            splits: nodes.iter().map(|&v| self.splits[v]).collect(),
            row_normalize: self.row_normalize,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphDatasetManifest {
    pub name: String,
    pub classes: usize,
    pub row_normalize: bool,
    pub features: FileEntry,
    pub edges: FileEntry,
    pub labels: FileEntry,
    pub splits: FileEntry,
}

pub const MANIFEST_FILE: &str = "manifest.toml";

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_checked(dir: &Path, entry: &FileEntry) -> Result<(PathBuf, String)> {
    let path = dir.join(&entry.path);
    let bytes = std::fs::read(&path).map_err(|e| BamError::io(&path, e))?;
    if sha256_hex(&bytes) != entry.sha256.to_ascii_lowercase() {
        return Err(BamError::Integrity(path));
    }
    let text = String::from_utf8(bytes).map_err(|e| BamError::Parse {
        path: path.clone(),
        line: 0,
        msg: format!("not UTF-8: {e}"),
    })?;
    Ok((path, text))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> BamError {
    BamError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, field: &str, what: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    field
        .parse()
        .map_err(|e| parse_err(path, line, format!("bad {what} {field:?}: {e}")))
}

fn numbered_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l))
}

fn parse_features(path: &Path, text: &str) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (no, line) in numbered_lines(text) {
        let mut fields = line.split('\t');
        let id: usize = parse_field(path, no, fields.next().unwrap_or(""), "node id")?;
        if id != rows {
            return Err(parse_err(path, no, format!("expected node id {rows}, found {id}")));
        }
        let before = data.len();
        for f in fields {
            data.push(parse_field::<f64>(path, no, f, "feature value")?);
        }
        let w = data.len() - before;
        match width {
            None if w == 0 => return Err(parse_err(path, no, "node has no features")),
            None => width = Some(w),
            Some(expected) if expected != w => {
                return Err(parse_err(path, no, format!("expected {expected} features, found {w}")))
            }
            _ => {}
        }
        rows += 1;
    }
    let width = width.ok_or_else(|| parse_err(path, 1, "no nodes"))?;
    Tensor::matrix(rows, width, data)
}

fn parse_pairs(path: &Path, text: &str, n: usize) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for (no, line) in numbered_lines(text) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(parse_err(path, no, format!("expected 2 fields, found {}", fields.len())));
        }
        let a: usize = parse_field(path, no, fields[0], "node id")?;
        let b: usize = parse_field(path, no, fields[1], "node id")?;
        if a >= n || b >= n {
            return Err(parse_err(path, no, format!("edge ({a}, {b}) outside 0..{n}")));
        }
        edges.push((a, b));
    }
    Ok(edges)
}

/// Parses `node_id <tab> value` lines covering every node exactly once.
fn parse_per_node<T: Copy>(path: &Path, text: &str, n: usize, parse: impl Fn(usize, &str) -> Result<T>) -> Result<Vec<T>> {
    let mut out: Vec<Option<T>> = vec![None; n];
    for (no, line) in numbered_lines(text) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(parse_err(path, no, format!("expected 2 fields, found {}", fields.len())));
        }
        let id: usize = parse_field(path, no, fields[0], "node id")?;
        if id >= n {
            return Err(parse_err(path, no, format!("node {id} outside 0..{n}")));
        }
        if out[id].is_some() {
            return Err(parse_err(path, no, format!("node {id} listed twice")));
        }
        out[id] = Some(parse(no, fields[1])?);
    }
    out.into_iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| parse_err(path, 0, format!("node {i} missing"))))
        .collect()
}

/// Loads and validates the dataset described by a manifest file.
pub fn load_graph(manifest_path: &Path) -> Result<GraphDataset> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| BamError::io(manifest_path, e))?;
    let manifest: GraphDatasetManifest = toml::from_str(&text).map_err(|e| {
        let line = e.span().map_or(0, |s| text[..s.start].lines().count().max(1));
        parse_err(manifest_path, line, e.message().to_string())
    })?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));

    let (fpath, ftext) = read_checked(dir, &manifest.features)?;
    let features = parse_features(&fpath, &ftext)?;
    let n = features.rows();
    let (epath, etext) = read_checked(dir, &manifest.edges)?;
    let edges = parse_pairs(&epath, &etext, n)?;
    let (lpath, ltext) = read_checked(dir, &manifest.labels)?;
    let labels = parse_per_node(&lpath, &ltext, n, |no, f| parse_field(&lpath, no, f, "label"))?;
    let (spath, stext) = read_checked(dir, &manifest.splits)?;
    let splits = parse_per_node(&spath, &stext, n, |no, f| match f {
        "train" => Ok(SplitTag::Train),
        "val" => Ok(SplitTag::Val),
        "test" => Ok(SplitTag::Test),
        "none" => Ok(SplitTag::None),
        other => Err(parse_err(&spath, no, format!("unknown split {other:?}"))),
    })?;

    let dataset = GraphDataset {
        name: manifest.name,
        features,
        edges,
        labels,
        classes: manifest.classes,
        splits,
        row_normalize: manifest.row_normalize,
    };
    dataset.validate()?;
    dataset.validate_reference()?;
    Ok(dataset)
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<FileEntry> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| BamError::io(&path, e))?;
    Ok(FileEntry {
        path: PathBuf::from(name),
        sha256: sha256_hex(contents.as_bytes()),
    })
}

/// Writes a dataset directory and returns its manifest.
pub fn write_graph(dataset: &GraphDataset, dir: &Path) -> Result<GraphDatasetManifest> {
    dataset.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| BamError::io(dir, e))?;

    let mut features = String::new();
    for i in 0..dataset.num_nodes() {
        let _ = write!(features, "{i}");
        for v in dataset.features.row(i) {
            let _ = write!(features, "\t{v}");
        }
        features.push('\n');
    }
    let mut edges = String::new();
    for (a, b) in &dataset.edges {
        let _ = writeln!(edges, "{a}\t{b}");
    }
    let mut labels = String::new();
    let mut splits = String::new();
    for i in 0..dataset.num_nodes() {
        let _ = writeln!(labels, "{i}\t{}", dataset.labels[i]);
        let _ = writeln!(splits, "{i}\t{}", dataset.splits[i].as_str());
    }

    let manifest = GraphDatasetManifest {
        name: dataset.name.clone(),
        classes: dataset.classes,
        row_normalize: dataset.row_normalize,
        features: write_file(dir, "features.tsv", &features)?,
        edges: write_file(dir, "edges.tsv", &edges)?,
        labels: write_file(dir, "labels.tsv", &labels)?,
        splits: write_file(dir, "splits.tsv", &splits)?,
    };
    let text = toml::to_string(&manifest).map_err(|e| BamError::Config(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, text).map_err(|e| BamError::io(&path, e))?;
    Ok(manifest)
}

/// Generator settings for a citation-like graph with planted classes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CitationParams {
    pub nodes: usize,
    pub features: usize,
    pub classes: usize,
    pub edges: usize,
    /// Probability that an edge joins two nodes of the same class.
    pub homophily: f64,
    /// Words drawn per node, with replacement.
    pub words_per_node: usize,
    /// Probability that a word comes from the node's class vocabulary
    /// rather than the whole vocabulary.
    pub topic_fraction: f64,
    pub train_per_class: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for CitationParams {
    /// Cora-sized.
    fn default() -> Self {
        CitationParams {
            nodes: 2708,
            features: 1433,
            classes: 7,
            edges: 5429,
            homophily: 0.8,
            words_per_node: 18,
            topic_fraction: 0.12,
            train_per_class: 20,
            val: 500,
            test: 1000,
        }
    }
}

/// A graph whose nodes have class-dependent bag-of-words features and
/// mostly same-class edges. Classes are assigned round-robin, vocabulary
/// blocks are contiguous, and the split takes `train_per_class` nodes per
/// class, then `val`, then `test` nodes in random order.
pub fn synthetic_citation_graph(name: &str, p: &CitationParams, rng: &mut dyn rand::RngCore) -> Result<GraphDataset> {
    use rand::seq::SliceRandom;
    use rand::Rng;

    let c = p.classes;
    if c < 2 || p.nodes < 2 * c || p.features < c || p.train_per_class * c + p.val + p.test > p.nodes {
        return Err(BamError::Config(format!("citation graph settings are inconsistent: {p:?}")));
    }
    if !(0.0..=1.0).contains(&p.homophily) || !(0.0..=1.0).contains(&p.topic_fraction) {
        return Err(BamError::Config("homophily and topic_fraction must lie in [0, 1]".into()));
    }
    let labels: Vec<usize> = (0..p.nodes).map(|i| i % c).collect();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }

    let block = p.features / c;
    let mut features = vec![0.0; p.nodes * p.features];
    for (i, &l) in labels.iter().enumerate() {
        for _ in 0..p.words_per_node {
            let word = if rng.random::<f64>() < p.topic_fraction {
                l * block + rng.random_range(0..block)
            } else {
                rng.random_range(0..p.features)
            };
            features[i * p.features + word] = 1.0;
        }
    }

    let mut edges = Vec::with_capacity(p.edges);
    while edges.len() < p.edges {
        let a = rng.random_range(0..p.nodes);
        let class = if rng.random::<f64>() < p.homophily {
            labels[a]
        } else {
            let other = rng.random_range(0..c - 1);
            if other >= labels[a] {
                other + 1
            } else {
                other
            }
        };
        let b = by_class[class][rng.random_range(0..by_class[class].len())];
        if a != b {
            edges.push((a, b));
        }
    }

    let mut splits = vec![SplitTag::None; p.nodes];
    let mut order: Vec<usize> = (0..p.nodes).collect();
    order.shuffle(rng);
    let mut taken = vec![0; c];
    let mut rest = Vec::with_capacity(p.nodes);
    for &i in &order {
        if taken[labels[i]] < p.train_per_class {
            taken[labels[i]] += 1;
            splits[i] = SplitTag::Train;
        } else {
            rest.push(i);
        }
    }
    for &i in &rest[..p.val] {
        splits[i] = SplitTag::Val;
    }
    for &i in &rest[p.val..p.val + p.test] {
        splits[i] = SplitTag::Test;
    }

    Ok(GraphDataset {
        name: name.to_string(),
        features: Tensor::matrix(p.nodes, p.features, features)?,
        edges,
        labels,
        classes: c,
        splits,
        row_normalize: true,
    })
}
