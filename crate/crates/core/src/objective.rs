//! Training objective, KL annealing, Adam and the training loop.
//!
//! The minimized loss is
//! `nll + λ_kl · Σ_layers KL + l2 · Σ ‖θ‖²` with `λ_kl = sigmoid((t − t₀)·ρ)`.

use std::sync::Arc;
use std::time::Instant;

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{ForwardMode, HeadOutput};
use crate::autodiff::{Tape, Var};
use crate::error::{BamError, Result};
use crate::params::{ParamGroup, ParamStore};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// KL weight at step `t`: `sigmoid((t − t0)·ρ)`.
pub fn anneal(t: u64, rho: f64, t0: f64) -> Result<f64> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(BamError::Parameter(format!("anneal rate must be positive, got {rho}")));
    }
    Ok(sigmoid((t as f64 - t0) * rho))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub kl_per_layer: Vec<f64>,
    pub kl_weight: f64,
    /// `l2_lambda · Σ‖θ‖²`, already weighted.
    pub l2: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn kl_sum(&self) -> f64 {
        self.kl_per_layer.iter().sum()
    }
}

/// Assembles the loss on the tape. KL terms are skipped entirely when the
/// weight is zero, so nothing upstream of them receives gradient.
#[allow(clippy::too_many_arguments)]
pub fn loss(
    tape: &mut Tape,
    logits: Var,
    rows: Arc<Vec<usize>>,
    targets: Arc<Vec<usize>>,
    kl_terms: &[Var],
    kl_weight: f64,
    l2_lambda: f64,
    l2_params: &[Var],
) -> Result<(Var, LossBreakdown)> {
    let nll = tape.cross_entropy(logits, rows, targets)?;
    let mut total = nll;
    let mut kl_per_layer = Vec::with_capacity(kl_terms.len());
    for &kl in kl_terms {
        kl_per_layer.push(tape.value(kl).item()?);
    }
    if kl_weight != 0.0 && !kl_terms.is_empty() {
        let mut kl_sum = kl_terms[0];
        for &kl in &kl_terms[1..] {
            kl_sum = tape.add(kl_sum, kl)?;
        }
        let weighted = tape.scale(kl_sum, kl_weight);
        total = tape.add(total, weighted)?;
    }
    let mut l2 = 0.0;
    if l2_lambda != 0.0 && !l2_params.is_empty() {
        let mut squares = Vec::with_capacity(l2_params.len());
        for &p in l2_params {
            let sq = tape.mul(p, p)?;
            squares.push(tape.sum(sq));
        }
        let mut acc = squares[0];
        for &s in &squares[1..] {
            acc = tape.add(acc, s)?;
        }
        let weighted = tape.scale(acc, l2_lambda);
        l2 = tape.value(weighted).item()?;
        total = tape.add(total, weighted)?;
    }
    let breakdown = LossBreakdown {
        nll: tape.value(nll).item()?,
        kl_per_layer,
        kl_weight,
        l2,
        total: tape.value(total).item()?,
    };
    Ok((total, breakdown))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.entries().iter().map(|e| vec![0.0; e.tensor.len()]).collect();
        Adam {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update. Any non-finite gradient aborts before a
    /// single parameter changes.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(BamError::Dimension(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.len() != params.tensor(i).len() {
                return Err(BamError::Dimension(format!(
                    "gradient of {} has {} entries, parameter has {}",
                    params.entries()[i].name,
                    g.len(),
                    params.tensor(i).len()
                )));
            }
            if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                return Err(BamError::Divergence {
                    step: self.t,
                    detail: format!("gradient of {}[{j}] is {}", params.entries()[i].name, g[j]),
                });
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = params.tensor_mut(i).data_mut();
            for j in 0..g.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                data[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub params: ParamStore,
    pub adam: Adam,
    pub rho: f64,
    pub t0: f64,
    pub kl_weight: f64,
}

impl TrainState {
    pub fn new(params: ParamStore, adam: AdamConfig, rho: f64, t0: f64) -> Result<Self> {
        let kl_weight = anneal(0, rho, t0)?;
        Ok(TrainState {
            step: 0,
            adam: Adam::new(adam, &params),
            params,
            rho,
            t0,
            kl_weight,
        })
    }
}

/// Applies one Adam update, advances the step and refreshes the KL weight.
pub fn adam_step(state: &mut TrainState, grads: &[Vec<f64>]) -> Result<()> {
    state.adam.step(&mut state.params, grads)?;
    state.step += 1;
    state.kl_weight = anneal(state.step, state.rho, state.t0)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// What a model's forward pass hands to the trainer.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Logit rows that carry labels, and their labels.
    pub rows: Arc<Vec<usize>>,
    pub targets: Arc<Vec<usize>>,
    /// One KL term per layer, empty when no KL applies.
    pub kl_layers: Vec<Var>,
    /// Per layer, per head attention results.
    pub heads: Vec<Vec<HeadOutput>>,
    /// Per layer, per head `Ψ` when a contextual prior is used.
    pub psi: Vec<Vec<Option<Var>>>,
}

/// A trainable classifier.
pub trait Model {
    type Batch;

    fn init_params(&self, rng: &mut dyn RngCore) -> Result<ParamStore>;

    /// Minibatches for one epoch.
    fn train_batches(&self, rng: &mut dyn RngCore) -> Result<Vec<Self::Batch>>;

    fn split_batch(&self, split: Split) -> Result<Self::Batch>;

    /// `vars` are the store's parameters bound on `tape`, in store order.
    fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &Self::Batch,
        fwd: ForwardMode,
        rng: &mut dyn RngCore,
    ) -> Result<ForwardOutput>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub l2_lambda: f64,
    pub rho: f64,
    pub anneal_offset: f64,
    pub patience: u64,
    pub max_epochs: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            l2_lambda: 0.0,
            rho: 0.1,
            anneal_offset: 0.0,
            patience: 100,
            max_epochs: 1000,
        }
    }
}

/// One evaluation snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub seed: u64,
    pub epoch: u64,
    /// Optimizer steps completed when the record was taken.
    pub step: u64,
    pub split: Split,
    pub nll: f64,
    pub kl: f64,
    pub l2: f64,
    pub total: f64,
    pub kl_weight: f64,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pavpu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss seen.
    pub params: ParamStore,
    pub best_epoch: u64,
    pub best_val_nll: f64,
    pub epochs_run: u64,
    pub history: Vec<MetricsRecord>,
    /// Wall time of every optimizer step, in milliseconds.
    pub step_ms: Vec<f64>,
}

/// Fraction of labeled rows whose largest logit is the label.
pub fn accuracy(tape: &Tape, out: &ForwardOutput) -> f64 {
    let logits = tape.value(out.logits);
    let correct = out
        .rows
        .iter()
        .zip(out.targets.iter())
        .filter(|(&r, &t)| argmax(logits.row(r)) == t)
        .count();
    correct as f64 / out.rows.len() as f64
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn l2_vars(params: &ParamStore, vars: &[Var]) -> Vec<Var> {
    params
        .entries()
        .iter()
        .zip(vars)
        .filter(|(e, _)| e.group == ParamGroup::Weight)
        .map(|(_, &v)| v)
        .collect()
}

/// Expectation-substituted loss and accuracy on one split.
pub fn evaluate<M: Model>(model: &M, params: &ParamStore, split: Split, rng: &mut dyn RngCore) -> Result<(f64, f64)> {
    let batch = model.split_batch(split)?;
    let mut tape = Tape::new();
    let vars = params.bind_constant(&mut tape);
    let out = model.forward(&mut tape, &vars, &batch, ForwardMode::EVAL, rng)?;
    let nll = tape.cross_entropy(out.logits, out.rows.clone(), out.targets.clone())?;
    Ok((tape.value(nll).item()?, accuracy(&tape, &out)))
}

/// One training step on a batch; returns the loss breakdown and the batch
/// accuracy of the sampled forward pass.
pub fn train_step<M: Model>(
    model: &M,
    state: &mut TrainState,
    batch: &M::Batch,
    l2_lambda: f64,
    rng: &mut dyn RngCore,
) -> Result<(LossBreakdown, f64)> {
    let mut tape = Tape::new();
    let vars = state.params.bind(&mut tape);
    let out = model.forward(&mut tape, &vars, batch, ForwardMode::TRAIN, rng)?;
    let l2 = l2_vars(&state.params, &vars);
    let (total, breakdown) = loss(
        &mut tape,
        out.logits,
        out.rows.clone(),
        out.targets.clone(),
        &out.kl_layers,
        state.kl_weight,
        l2_lambda,
        &l2,
    )?;
    if !breakdown.total.is_finite() {
        return Err(BamError::Divergence {
            step: state.step,
            detail: format!("loss is {}", breakdown.total),
        });
    }
    let acc = accuracy(&tape, &out);
    tape.backward(total)?;
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(state.params.entries())
        .map(|(&v, e)| tape.grad(v).map_or_else(|| vec![0.0; e.tensor.len()], <[f64]>::to_vec))
        .collect();
    adam_step(state, &grads)?;
    Ok((breakdown, acc))
}

/// Trains until validation stops improving. Every record is passed to
/// `on_record` as soon as it exists, so a failed run leaves its prefix.
pub fn train<M: Model>(
    model: &M,
    cfg: &TrainConfig,
    seed: u64,
    mut on_record: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = model.init_params(&mut rng)?;
    let mut state = TrainState::new(params, cfg.adam, cfg.rho, cfg.anneal_offset)?;
    let mut history = Vec::new();
    let mut step_ms = Vec::new();
    let mut best = (state.params.clone(), 0u64, f64::INFINITY);
    let mut best_acc = f64::NEG_INFINITY;
    let mut wait = 0u64;
    let mut epochs_run = 0;

    for epoch in 0..cfg.max_epochs {
        let batches = model.train_batches(&mut rng)?;
        let mut sums = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut last_weight = state.kl_weight;
        for batch in &batches {
            last_weight = state.kl_weight;
            let started = Instant::now();
            let (b, acc) = train_step(model, &mut state, batch, cfg.l2_lambda, &mut rng)?;
            step_ms.push(started.elapsed().as_secs_f64() * 1e3);
            sums.0 += b.nll;
            sums.1 += b.kl_sum();
            sums.2 += b.l2;
            sums.3 += b.total;
            sums.4 += acc;
        }
        let nb = batches.len().max(1) as f64;
        let train_record = MetricsRecord {
            seed,
            epoch,
            step: state.step,
            split: Split::Train,
            nll: sums.0 / nb,
            kl: sums.1 / nb,
            l2: sums.2 / nb,
            total: sums.3 / nb,
            kl_weight: last_weight,
            accuracy: sums.4 / nb,
            pavpu: None,
            wall_ms: None,
        };
        let (val_nll, val_acc) = evaluate(model, &state.params, Split::Val, &mut rng)?;
        let val_record = MetricsRecord {
            split: Split::Val,
            nll: val_nll,
            kl: 0.0,
            l2: 0.0,
            total: val_nll,
            accuracy: val_acc,
            ..train_record.clone()
        };
        for r in [train_record, val_record] {
            on_record(&r)?;
            history.push(r);
        }
        epochs_run = epoch + 1;

        let mut improved = false;
        if val_nll < best.2 {
            best = (state.params.clone(), epoch, val_nll);
            improved = true;
        }
        if val_acc > best_acc {
            best_acc = val_acc;
            improved = true;
        }
        if improved {
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        params: best.0,
        best_epoch: best.1,
        best_val_nll: best.2,
        epochs_run,
        history,
        step_ms,
    })
}
