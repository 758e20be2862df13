//! Synthetic alignment task.
//!
//! Each instance has `n` keys in `d` dimensions. The first `classes`
//! coordinates of a key hold a noisy one-hot code of its class; the rest hold
//! small isotropic noise. One designated key additionally carries
//! `signal · u` for a random unit vector `u` in the noise coordinates, and the
//! query is `u` itself. The label is the class of the designated key, so a
//! model must align the query with the right key to answer.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::ForwardMode;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{BamError, Result};
use crate::objective::{ForwardOutput, Model, Split};
use crate::params::ParamStore;

use super::classifier::{AttentionClassifier, SeqBatch};

/// Half-width of the uniform class-code noise. Below 0.5 the largest code
/// coordinate always names the class.
const CLASS_NOISE: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticParams {
    pub n: usize,
    pub d: usize,
    pub classes: usize,
    pub signal: f64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            n: 8,
            d: 16,
            classes: 4,
            signal: 3.0,
            train: 2000,
            val: 500,
            test: 500,
        }
    }
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.d < 2 {
            return Err(BamError::Config(format!("synthetic task needs n >= 2 and d >= 2, got n = {}, d = {}", self.n, self.d)));
        }
        if self.classes < 2 || self.classes >= self.d {
            return Err(BamError::Config(format!(
                "synthetic task needs 2 <= classes < d, got {} classes with d = {}",
                self.classes, self.d
            )));
        }
        if !(self.signal >= 0.0 && self.signal.is_finite()) {
            return Err(BamError::Config(format!("signal must be finite and non-negative, got {}", self.signal)));
        }
        Ok(())
    }
}

/// Instances of one split, stored row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSplit {
    /// `count×d`.
    pub queries: Tensor,
    /// `(count·n)×d`, instance by instance.
    pub keys: Tensor,
    pub labels: Vec<usize>,
    /// Index of the designated key within each instance.
    pub designated: Vec<usize>,
    /// Class of every key.
    pub key_classes: Vec<usize>,
}

impl SyntheticSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Instances `idx` as a batch.
    pub fn batch(&self, idx: &[usize], n: usize, dense: bool) -> Result<SeqBatch> {
        let d = self.queries.cols();
        let mut q = Vec::with_capacity(idx.len() * d);
        let mut k = Vec::with_capacity(idx.len() * n * d);
        for &i in idx {
            q.extend_from_slice(self.queries.row(i));
            k.extend_from_slice(&self.keys.data()[i * n * d..(i + 1) * n * d]);
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        SeqBatch::new(
            Tensor::matrix(idx.len(), d, q)?,
            Tensor::matrix(idx.len() * n, d, k)?,
            labels,
            idx.len(),
            dense,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub params: SyntheticParams,
    pub train: SyntheticSplit,
    pub val: SyntheticSplit,
    pub test: SyntheticSplit,
}

impl SyntheticTask {
    pub fn split(&self, split: Split) -> &SyntheticSplit {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Little-endian serialization of every value, for byte comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for s in [&self.train, &self.val, &self.test] {
            for v in s.queries.data().iter().chain(s.keys.data()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for &v in s.labels.iter().chain(&s.designated).chain(&s.key_classes) {
                out.extend_from_slice(&(v as u64).to_le_bytes());
            }
        }
        out
    }
}

fn generate_split(p: &SyntheticParams, count: usize, rng: &mut dyn RngCore) -> Result<SyntheticSplit> {
    let (n, d, c) = (p.n, p.d, p.classes);
    let free = d - c;
    let mut queries = Vec::with_capacity(count * d);
    let mut keys = Vec::with_capacity(count * n * d);
    let mut labels = Vec::with_capacity(count);
    let mut designated = Vec::with_capacity(count);
    let mut key_classes = Vec::with_capacity(count * n);
    let noise_sd = 1.0 / (free as f64).sqrt();
    for _ in 0..count {
        let mut classes: Vec<usize> = (0..n).map(|j| j % c).collect();
        classes.shuffle(rng);
        let star = rng.random_range(0..n);
        let mut u: Vec<f64> = (0..free).map(|_| rng.sample(StandardNormal)).collect();
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        u.iter_mut().for_each(|x| *x /= norm);

        queries.extend(std::iter::repeat_n(0.0, c));
        queries.extend_from_slice(&u);
        for (j, &class) in classes.iter().enumerate() {
            for i in 0..c {
                let code = if i == class { 1.0 } else { 0.0 };
                keys.push(code + rng.random_range(-CLASS_NOISE..CLASS_NOISE));
            }
            for ui in &u {
                let marker = if j == star { p.signal * ui } else { 0.0 };
                keys.push(marker + noise_sd * rng.sample::<f64, _>(StandardNormal));
            }
        }
        labels.push(classes[star]);
        designated.push(star);
        key_classes.extend_from_slice(&classes);
    }
    Ok(SyntheticSplit {
        queries: Tensor::matrix(count, d, queries)?,
        keys: Tensor::matrix(count * n, d, keys)?,
        labels,
        designated,
        key_classes,
    })
}

/// Draws the train, validation and test splits in that order.
pub fn generate_synthetic(params: &SyntheticParams, rng: &mut dyn RngCore) -> Result<SyntheticTask> {
    params.validate()?;
    Ok(SyntheticTask {
        params: *params,
        train: generate_split(params, params.train, rng)?,
        val: generate_split(params, params.val, rng)?,
        test: generate_split(params, params.test, rng)?,
    })
}

/// The classifier trained on a synthetic task with shuffled minibatches.
#[derive(Clone, Debug)]
pub struct SyntheticModel {
    pub classifier: AttentionClassifier,
    pub task: Arc<SyntheticTask>,
    pub batch_size: usize,
    pub dense: bool,
}

impl SyntheticModel {
    pub fn new(classifier: AttentionClassifier, task: Arc<SyntheticTask>, batch_size: usize, dense: bool) -> Result<Self> {
        let p = &task.params;
        if classifier.cfg.d_query != p.d || classifier.cfg.d_key != p.d || classifier.cfg.classes != p.classes {
            return Err(BamError::Config(format!(
                "classifier expects d = {}/{} and {} classes, task has d = {} and {} classes",
                classifier.cfg.d_query, classifier.cfg.d_key, classifier.cfg.classes, p.d, p.classes
            )));
        }
        if batch_size == 0 {
            return Err(BamError::Config("batch size must be positive".into()));
        }
        Ok(SyntheticModel {
            classifier,
            task,
            batch_size,
            dense,
        })
    }
}

impl Model for SyntheticModel {
    type Batch = SeqBatch;

    fn init_params(&self, rng: &mut dyn RngCore) -> Result<ParamStore> {
        self.classifier.init_params(rng)
    }

    fn train_batches(&self, rng: &mut dyn RngCore) -> Result<Vec<SeqBatch>> {
        let mut order: Vec<usize> = (0..self.task.train.len()).collect();
        order.shuffle(rng);
        order
            .chunks(self.batch_size)
            .map(|idx| self.task.train.batch(idx, self.task.params.n, self.dense))
            .collect()
    }

    fn split_batch(&self, split: Split) -> Result<SeqBatch> {
        let s = self.task.split(split);
        let idx: Vec<usize> = (0..s.len()).collect();
        s.batch(&idx, self.task.params.n, self.dense)
    }

    fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &SeqBatch,
        fwd: ForwardMode,
        rng: &mut dyn RngCore,
    ) -> Result<ForwardOutput> {
        self.classifier.forward(tape, vars, batch, fwd, rng)
    }
}
