//! Named parameter collections and their on-disk form.
//!
//! File layout (UTF-8 text):
//!
//! ```text
//! bam-params 1
//! sha256 <hex digest of everything after this line>
//! tensor <name> <group> <dim>x<dim>...
//! <values separated by single spaces>
//! ...
//! ```
//!
//! Values are written in shortest round-trip exponent form, so a load
//! reproduces every bit.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{BamError, Result};

const MAGIC: &str = "bam-params 1";

/// Role of a parameter, which decides whether it is L2-penalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// Projection and classifier matrices; L2-penalized.
    Weight,
    /// Additive offsets; not penalized.
    Bias,
    /// Contextual prior network; shaped only by the KL term.
    Prior,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Weight => "weight",
            ParamGroup::Bias => "bias",
            ParamGroup::Prior => "prior",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "weight" => Some(ParamGroup::Weight),
            "bias" => Some(ParamGroup::Bias),
            "prior" => Some(ParamGroup::Prior),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its index.
    pub fn push(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> Result<usize> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(BamError::Parameter(format!("invalid parameter name {name:?}")));
        }
        if self.index_of(&name).is_some() {
            return Err(BamError::Parameter(format!("duplicate parameter {name}")));
        }
        self.entries.push(ParamEntry { name, group, tensor });
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].tensor)
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.entries[index].tensor
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].tensor
    }

    /// Number of scalars, optionally restricted to one group.
    pub fn scalar_count(&self, group: Option<ParamGroup>) -> usize {
        self.entries
            .iter()
            .filter(|e| group.is_none_or(|g| e.group == g))
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Records every parameter on the tape as a gradient-tracking leaf,
    /// returning variables in store order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries.iter().map(|e| tape.param(e.tensor.clone())).collect()
    }

    /// Like [`bind`](Self::bind) but without gradient tracking.
    pub fn bind_constant(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries.iter().map(|e| tape.constant(e.tensor.clone())).collect()
    }

    /// Checks that another store has the same names, groups and shapes.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(BamError::Shape(format!(
                "{} parameters expected, {} found",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.group != b.group || a.tensor.shape() != b.tensor.shape() {
                return Err(BamError::Shape(format!(
                    "parameter {} {:?} {:?} does not match {} {:?} {:?}",
                    a.name,
                    a.group,
                    a.tensor.shape(),
                    b.name,
                    b.group,
                    b.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    fn body(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let dims: Vec<String> = e.tensor.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(out, "tensor {} {} {}", e.name, e.group.as_str(), dims.join("x"));
            let values: Vec<String> = e.tensor.data().iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(out, "{}", values.join(" "));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let body = self.body();
        format!("{MAGIC}\nsha256 {}\n{body}", hex::encode(Sha256::digest(body.as_bytes())))
    }

    /// Parses [`to_text`](Self::to_text) output; `path` only labels errors.
    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, msg: String| BamError::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut header = text.splitn(3, '\n');
        if header.next() != Some(MAGIC) {
            return Err(parse_err(1, format!("expected header {MAGIC:?}")));
        }
        let digest = header
            .next()
            .and_then(|l| l.strip_prefix("sha256 "))
            .ok_or_else(|| parse_err(2, "expected a sha256 line".into()))?;
        let body = header.next().unwrap_or("");
        if hex::encode(Sha256::digest(body.as_bytes())) != digest {
            return Err(BamError::Integrity(path.to_path_buf()));
        }

        let mut store = ParamStore::new();
        let mut lines = body.lines().enumerate().map(|(i, l)| (i + 3, l));
        while let Some((no, line)) = lines.next() {
            let fields: Vec<&str> = line.split(' ').collect();
            if fields.len() != 4 || fields[0] != "tensor" {
                return Err(parse_err(no, format!("expected `tensor <name> <group> <shape>`, got {line:?}")));
            }
            let group =
                ParamGroup::parse(fields[2]).ok_or_else(|| parse_err(no, format!("unknown group {:?}", fields[2])))?;
            let shape = fields[3]
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(no, format!("bad shape {:?}: {e}", fields[3])))?;
            let (vno, values) = lines
                .next()
                .ok_or_else(|| parse_err(no + 1, format!("missing values for {}", fields[1])))?;
            let data = values
                .split(' ')
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(vno, format!("bad value: {e}")))?;
            let tensor = Tensor::new(shape, data).map_err(|e| parse_err(vno, e.to_string()))?;
            store.push(fields[1], group, tensor).map_err(|e| parse_err(no, e.to_string()))?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| BamError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BamError::io(path, e))?;
        Self::from_text(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.push("a.w", ParamGroup::Weight, Tensor::matrix(2, 2, vec![0.1, -1e-300, 3.5e10, f64::MIN_POSITIVE]).unwrap())
            .unwrap();
        s.push("a.b", ParamGroup::Bias, Tensor::vector(vec![1.0 / 3.0]).unwrap()).unwrap();
        s
    }

    #[test]
    fn text_round_trip_is_exact() {
        let s = sample_store();
        let back = ParamStore::from_text(&s.to_text(), Path::new("mem")).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn corruption_is_detected() {
        let text = sample_store().to_text().replacen("0.", "0,", 1).replacen("1e-1", "2e-1", 1);
        assert!(matches!(ParamStore::from_text(&text, Path::new("mem")), Err(BamError::Integrity(_))));
    }

    #[test]
    fn duplicates_rejected() {
        let mut s = sample_store();
        assert!(s.push("a.b", ParamGroup::Bias, Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn counts_by_group() {
        let s = sample_store();
        assert_eq!(s.scalar_count(None), 5);
        assert_eq!(s.scalar_count(Some(ParamGroup::Bias)), 1);
        assert_eq!(s.scalar_count(Some(ParamGroup::Prior)), 0);
    }
}
