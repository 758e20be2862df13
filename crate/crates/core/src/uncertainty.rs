//! Posterior predictive sampling and the PAvPU uncertainty metric.
//!
//! An instance counts as certain when a Welch two-sample t-test separates
//! the sampled probabilities of its two classes with the highest posterior
//! means. PAvPU is the fraction of instances that are accurate and certain
//! or inaccurate and uncertain.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::attention::ForwardMode;
use crate::autodiff::Tape;
use crate::distributions::special::student_t_two_sided;
use crate::error::{BamError, Result};
use crate::objective::{argmax, Model};
use crate::params::ParamStore;

/// Predicted class probabilities from `m` stochastic forward passes.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorPredictions {
    m: usize,
    instances: usize,
    classes: usize,
    /// `m × instances × classes`, sample-major.
    probs: Vec<f64>,
}

impl PosteriorPredictions {
    pub fn new(m: usize, instances: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if m < 2 {
            return Err(BamError::Parameter(format!("need at least 2 posterior samples, got {m}")));
        }
        if probs.len() != m * instances * classes || classes == 0 {
            return Err(BamError::Dimension(format!(
                "{} probabilities for {m} samples of {instances} instances and {classes} classes",
                probs.len()
            )));
        }
        Ok(PosteriorPredictions {
            m,
            instances,
            classes,
            probs,
        })
    }

    pub fn samples(&self) -> usize {
        self.m
    }

    pub fn instances(&self) -> usize {
        self.instances
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Probability row of instance `i` in sample `s`.
    pub fn row(&self, s: usize, i: usize) -> &[f64] {
        let start = (s * self.instances + i) * self.classes;
        &self.probs[start..start + self.classes]
    }

    /// The `m` sampled probabilities of class `c` for instance `i`.
    pub fn class_samples(&self, i: usize, c: usize) -> Vec<f64> {
        (0..self.m).map(|s| self.row(s, i)[c]).collect()
    }

    pub fn mean_probs(&self, i: usize) -> Vec<f64> {
        let mut mean = vec![0.0; self.classes];
        for s in 0..self.m {
            for (acc, p) in mean.iter_mut().zip(self.row(s, i)) {
                *acc += p;
            }
        }
        mean.iter_mut().for_each(|x| *x /= self.m as f64);
        mean
    }

    /// Class with the highest posterior-mean probability, per instance.
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.instances).map(|i| argmax(&self.mean_probs(i))).collect()
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `m` forward passes with fresh attention noise each; dropout is active
/// when `dropout` is set. Probabilities cover the batch's labeled rows.
pub fn posterior_sample<M: Model>(
    model: &M,
    params: &ParamStore,
    batch: &M::Batch,
    m: usize,
    dropout: bool,
    rng: &mut dyn RngCore,
) -> Result<PosteriorPredictions> {
    if m < 2 {
        return Err(BamError::Parameter(format!("need at least 2 posterior samples, got {m}")));
    }
    let mut probs = Vec::new();
    let mut shape = (0, 0);
    for _ in 0..m {
        let mut tape = Tape::new();
        let vars = params.bind_constant(&mut tape);
        let out = model.forward(&mut tape, &vars, batch, ForwardMode::posterior(dropout), rng)?;
        let logits = tape.value(out.logits);
        shape = (out.rows.len(), logits.cols());
        for &r in out.rows.iter() {
            probs.extend(softmax(logits.row(r)));
        }
    }
    PosteriorPredictions::new(m, shape.0, shape.1, probs)
}

/// Welch's unequal-variance t-test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub t: f64,
    /// Welch-Satterthwaite degrees of freedom; NaN when both variances vanish.
    pub df: f64,
    pub p_value: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Two-sided Welch test of equal means. With both sample variances zero the
/// p-value is 1 for equal means and 0 otherwise.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(BamError::Parameter(format!(
            "Welch test needs at least 2 values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return Ok(if ma == mb {
            WelchTest {
                t: 0.0,
                df: f64::NAN,
                p_value: 1.0,
            }
        } else {
            WelchTest {
                t: (ma - mb).signum() * f64::INFINITY,
                df: f64::NAN,
                p_value: 0.0,
            }
        });
    }
    let t = (ma - mb) / se2.sqrt();
    // Ratios to the larger term keep the squares from underflowing.
    let top = sa.max(sb);
    let (ra, rb) = (sa / top, sb / top);
    let df = (ra + rb) * (ra + rb) / (ra * ra / (na - 1.0) + rb * rb / (nb - 1.0));
    Ok(WelchTest {
        t,
        df,
        p_value: student_t_two_sided(t, df)?,
    })
}

/// Per instance, whether the top two classes by posterior mean differ
/// significantly at `p_threshold`.
pub fn certainty(preds: &PosteriorPredictions, p_threshold: f64) -> Result<Vec<bool>> {
    if !(p_threshold > 0.0 && p_threshold < 1.0) {
        return Err(BamError::Parameter(format!("p_threshold must lie in (0, 1), got {p_threshold}")));
    }
    if preds.classes() < 2 {
        return Err(BamError::Parameter("certainty needs at least 2 classes".into()));
    }
    (0..preds.instances())
        .map(|i| {
            let mean = preds.mean_probs(i);
            let mut order: Vec<usize> = (0..mean.len()).collect();
            order.sort_by(|&x, &y| mean[y].total_cmp(&mean[x]).then(x.cmp(&y)));
            let test = welch_t_test(&preds.class_samples(i, order[0]), &preds.class_samples(i, order[1]))?;
            Ok(test.p_value < p_threshold)
        })
        .collect()
}

/// Instance counts of the four accuracy/certainty combinations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PavpuCounts {
    pub n_ac: f64,
    pub n_au: f64,
    pub n_ic: f64,
    pub n_iu: f64,
}

impl PavpuCounts {
    pub fn total(&self) -> f64 {
        self.n_ac + self.n_au + self.n_ic + self.n_iu
    }

    pub fn pavpu(&self) -> Result<f64> {
        let total = self.total();
        if total <= 0.0 {
            return Err(BamError::UndefinedMetric("PAvPU of zero instances".into()));
        }
        Ok((self.n_ac + self.n_iu) / total)
    }
}

/// `(n_ac + n_iu) / (n_ac + n_au + n_ic + n_iu)` with its counts.
pub fn pavpu(accurate: &[bool], certain: &[bool]) -> Result<(f64, PavpuCounts)> {
    if accurate.len() != certain.len() {
        return Err(BamError::Dimension(format!(
            "{} accuracy flags and {} certainty flags",
            accurate.len(),
            certain.len()
        )));
    }
    if accurate.is_empty() {
        return Err(BamError::UndefinedMetric("PAvPU of zero instances".into()));
    }
    let mut c = PavpuCounts::default();
    for (&a, &u) in accurate.iter().zip(certain) {
        match (a, u) {
            (true, true) => c.n_ac += 1.0,
            (true, false) => c.n_au += 1.0,
            (false, true) => c.n_ic += 1.0,
            (false, false) => c.n_iu += 1.0,
        }
    }
    Ok((c.pavpu()?, c))
}
