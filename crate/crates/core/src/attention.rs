//! Soft attention and its stochastic counterpart.
//!
//! Stochastic weights are computed on the compact list of unmasked entries
//! (row-major), so dense-with-mask and sparse supports consume identical
//! noise and produce identical weights. Unnormalized weights are formed from
//! row-max-shifted scores; the shift is a per-row constant and cancels when
//! the row is normalized.

use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mask, Pattern, Tape, Tensor, Var};
use crate::distributions::special::lgamma;
use crate::distributions::{draw_normal, draw_uniform, weibull_sample_var};
use crate::error::{BamError, Result};

/// How attention weights are produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttentionMode {
    Deterministic,
    Weibull { k: f64 },
    Lognormal { sigma: f64 },
}

impl AttentionMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AttentionMode::Deterministic => Ok(()),
            AttentionMode::Weibull { k } if k > 0.0 && k.is_finite() => Ok(()),
            AttentionMode::Lognormal { sigma } if sigma > 0.0 && sigma.is_finite() => Ok(()),
            other => Err(BamError::Parameter(format!("invalid attention mode {other:?}"))),
        }
    }

    pub fn is_stochastic(&self) -> bool {
        !matches!(self, AttentionMode::Deterministic)
    }

    /// Noise for `n` attention entries: uniform for Weibull, standard normal
    /// for Lognormal, nothing (and no RNG use) for deterministic attention.
    pub fn draw_noise(&self, rng: &mut dyn RngCore, n: usize) -> Option<Vec<f64>> {
        match self {
            AttentionMode::Deterministic => None,
            AttentionMode::Weibull { .. } => Some(draw_uniform(rng, n)),
            AttentionMode::Lognormal { .. } => Some(draw_normal(rng, n)),
        }
    }

    /// `ln Γ(1 + 1/k)`, the log of the Weibull mean factor; zero otherwise.
    pub fn log_mean_factor(&self) -> Result<f64> {
        match *self {
            AttentionMode::Weibull { k } => lgamma(1.0 + 1.0 / k),
            _ => Ok(0.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreFn {
    /// `QKᵀ/√d_k`.
    ScaledDotProduct,
    /// `LeakyReLU(a_qᵀ q_i + a_kᵀ k_j)`, the graph-attention form.
    AdditiveLeakyRelu { slope: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub mode: AttentionMode,
    pub heads: usize,
    pub score_fn: ScoreFn,
    pub d_k: usize,
    pub d_v: usize,
    /// Dropout on normalized attention weights during training.
    pub weight_dropout: f64,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        self.mode.validate()?;
        if self.heads == 0 || self.d_k == 0 || self.d_v == 0 {
            return Err(BamError::Parameter("heads, d_k and d_v must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.weight_dropout) {
            return Err(BamError::Parameter(format!(
                "attention dropout must lie in [0, 1), got {}",
                self.weight_dropout
            )));
        }
        Ok(())
    }
}

/// Which (query, key) pairs may attend.
#[derive(Clone, Debug)]
pub struct Support {
    pattern: Arc<Pattern>,
    dense: Option<DenseLayout>,
}

#[derive(Clone, Debug)]
struct DenseLayout {
    mask: Option<Arc<Mask>>,
    flat: Arc<Vec<usize>>,
}

impl Support {
    /// Dense `m×n` scores, optionally masked.
    pub fn dense(m: usize, n: usize, mask: Option<Mask>) -> Result<Self> {
        let pattern = match &mask {
            Some(mask) => {
                if mask.rows() != m || mask.cols() != n {
                    return Err(BamError::Dimension(format!(
                        "{}x{} mask for {m}x{n} scores",
                        mask.rows(),
                        mask.cols()
                    )));
                }
                Pattern::from_mask(mask)
            }
            None => Pattern::full(m, n),
        };
        pattern.ensure_rows_nonempty()?;
        let flat = Arc::new(pattern.flat_indices());
        Ok(Support {
            pattern: Arc::new(pattern),
            dense: Some(DenseLayout {
                mask: mask.map(Arc::new),
                flat,
            }),
        })
    }

    /// Scores stored per entry of `pattern`.
    pub fn sparse(pattern: Arc<Pattern>) -> Result<Self> {
        pattern.ensure_rows_nonempty()?;
        Ok(Support { pattern, dense: None })
    }

    pub fn pattern(&self) -> &Arc<Pattern> {
        &self.pattern
    }

    pub fn is_dense(&self) -> bool {
        self.dense.is_some()
    }

    pub fn mask(&self) -> Option<Arc<Mask>> {
        self.dense.as_ref().and_then(|d| d.mask.clone())
    }

    pub fn m(&self) -> usize {
        self.pattern.m()
    }

    pub fn n(&self) -> usize {
        self.pattern.n()
    }

    pub fn nnz(&self) -> usize {
        self.pattern.nnz()
    }

    /// Scores in the support's native layout as a compact per-entry vector.
    fn compact(&self, tape: &mut Tape, phi: Var) -> Result<Var> {
        match &self.dense {
            Some(d) => {
                self.expect_shape(tape, phi, &[self.m(), self.n()])?;
                tape.gather(phi, d.flat.clone())
            }
            None => {
                self.expect_shape(tape, phi, &[self.nnz()])?;
                Ok(phi)
            }
        }
    }

    fn expect_shape(&self, tape: &Tape, v: Var, shape: &[usize]) -> Result<()> {
        if tape.shape(v) != shape {
            return Err(BamError::Dimension(format!(
                "scores have shape {:?}, support expects {shape:?}",
                tape.shape(v)
            )));
        }
        Ok(())
    }

    /// `W V` from compact weights.
    fn aggregate(&self, tape: &mut Tape, w: Var, v: Var) -> Result<Var> {
        match &self.dense {
            Some(d) => {
                let dense = tape.scatter(w, d.flat.clone(), vec![self.m(), self.n()])?;
                tape.matmul(dense, v)
            }
            None => tape.edge_aggregate(w, v, self.pattern.clone()),
        }
    }
}

/// Parameters of the additive score: `a_q` (d×1) and `a_k` (d×1).
#[derive(Clone, Copy, Debug)]
pub struct AdditiveParams {
    pub a_q: Var,
    pub a_k: Var,
}

/// Alignment scores in the support's layout (`m×n` dense or compact).
pub fn score(
    tape: &mut Tape,
    q: Var,
    k: Var,
    score_fn: ScoreFn,
    additive: Option<AdditiveParams>,
    support: &Support,
) -> Result<Var> {
    let (qs, ks) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] || qs[0] != support.m() || ks[0] != support.n() {
        return Err(BamError::Dimension(format!(
            "queries {qs:?} and keys {ks:?} against a {}x{} support",
            support.m(),
            support.n()
        )));
    }
    match score_fn {
        ScoreFn::ScaledDotProduct => {
            let scale = 1.0 / (qs[1] as f64).sqrt();
            if support.is_dense() {
                let kt = tape.transpose(k)?;
                let raw = tape.matmul(q, kt)?;
                Ok(tape.scale(raw, scale))
            } else {
                tape.edge_dot(q, k, support.pattern.clone(), scale)
            }
        }
        ScoreFn::AdditiveLeakyRelu { slope } => {
            let a = additive.ok_or_else(|| BamError::Parameter("additive score needs a_q and a_k".into()))?;
            let fq = tape.matmul(q, a.a_q)?;
            let fk = tape.matmul(k, a.a_k)?;
            let raw = if support.is_dense() {
                tape.outer_sum(fq, fk)?
            } else {
                let p = &support.pattern;
                let rows = tape.gather(fq, Arc::new(p.row_ids().to_vec()))?;
                let cols = tape.gather(fk, Arc::new(p.col_ids().to_vec()))?;
                tape.add(rows, cols)?
            };
            Ok(tape.leaky_relu(raw, slope))
        }
    }
}

/// Soft attention: `W = softmax_rows(Φ)` over allowed entries, `O = W V`.
pub fn deterministic_attention(tape: &mut Tape, phi: Var, v: Var, mask: Option<Arc<Mask>>) -> Result<(Var, Var)> {
    let w = tape.softmax_rows(phi, mask)?;
    let o = tape.matmul(w, v)?;
    Ok((w, o))
}

/// One realization of the attention weights of a head, all values compact
/// over the support's entries.
#[derive(Clone, Debug)]
pub struct AttentionSample {
    pub pattern: Arc<Pattern>,
    pub mode: AttentionMode,
    /// Alignment scores Φ.
    pub phi: Var,
    /// Unnormalized weights, up to a positive per-row factor.
    pub s: Var,
    pub w: Var,
    /// `None` when the expectation was substituted for the sample.
    pub eps: Option<Vec<f64>>,
}

impl AttentionSample {
    /// Unshifted `ln λ` (Weibull) or `μ` (Lognormal) of the variational
    /// distribution at every entry.
    pub fn posterior_location(&self, tape: &mut Tape) -> Result<Var> {
        match self.mode {
            AttentionMode::Weibull { .. } => {
                let c = self.mode.log_mean_factor()?;
                Ok(tape.add_scalar(self.phi, -c))
            }
            AttentionMode::Lognormal { sigma } => Ok(tape.add_scalar(self.phi, -0.5 * sigma * sigma)),
            AttentionMode::Deterministic => Err(BamError::Config(
                "deterministic attention has no variational distribution".into(),
            )),
        }
    }

    /// Expands compact values to an `m×n` matrix with zeros off the support.
    pub fn densify(&self, compact: &[f64]) -> Result<Tensor> {
        let (m, n) = (self.pattern.m(), self.pattern.n());
        let mut out = vec![0.0; m * n];
        for (&i, &v) in self.pattern.flat_indices().iter().zip(compact) {
            out[i] = v;
        }
        Tensor::matrix(m, n, out)
    }
}

/// Attention weights for compact scores `phi_c`. With `eps` the weights are
/// sampled; without it every `S` is replaced by its mean `exp(Φ)`.
pub fn attention_weights(
    tape: &mut Tape,
    phi_c: Var,
    pattern: &Arc<Pattern>,
    mode: AttentionMode,
    eps: Option<&[f64]>,
) -> Result<AttentionSample> {
    mode.validate()?;
    let s = match (mode, eps) {
        (AttentionMode::Deterministic, _) | (_, None) => tape.exp_shifted(phi_c, pattern.clone())?,
        (_, Some(eps)) if eps.len() != pattern.nnz() => {
            return Err(BamError::Dimension(format!(
                "{} noise values for {} attention entries",
                eps.len(),
                pattern.nnz()
            )))
        }
        (AttentionMode::Weibull { k }, Some(eps)) => {
            let shifted_mean = tape.exp_shifted(phi_c, pattern.clone())?;
            let lambda = tape.scale(shifted_mean, (-mode.log_mean_factor()?).exp());
            weibull_sample_var(tape, lambda, k, eps)?
        }
        (AttentionMode::Lognormal { sigma }, Some(eps)) => {
            let mu = tape.add_scalar(phi_c, -0.5 * sigma * sigma);
            // exp(μ + σε) with the row maximum of the exponent taken out.
            let noise: Vec<f64> = eps.iter().map(|e| e * sigma).collect();
            let z = tape.add_const(mu, Arc::new(noise))?;
            tape.exp_shifted(z, pattern.clone())?
        }
    };
    let w = tape.segment_normalize(s, pattern.clone())?;
    Ok(AttentionSample {
        pattern: pattern.clone(),
        mode,
        phi: phi_c,
        s,
        w,
        eps: if mode.is_stochastic() { eps.map(<[f64]>::to_vec) } else { None },
    })
}

/// Dropout on normalized weights, applied only while training.
pub struct WeightDropout<'a> {
    pub p: f64,
    pub rng: &'a mut dyn RngCore,
}

/// Stochastic attention over a support. `training = false` substitutes the
/// expectation, which on a dense support runs exactly the soft-attention path.
pub fn stochastic_attention(
    tape: &mut Tape,
    phi: Var,
    v: Var,
    mode: AttentionMode,
    support: &Support,
    eps: Option<&[f64]>,
    training: bool,
    dropout: Option<WeightDropout<'_>>,
) -> Result<(AttentionSample, Var)> {
    let phi_c = support.compact(tape, phi)?;
    let active_dropout = dropout.filter(|d| training && d.p > 0.0);
    if !training || !mode.is_stochastic() {
        if let (Some(d), None) = (&support.dense, &active_dropout) {
            let (w_dense, o) = deterministic_attention(tape, phi, v, d.mask.clone())?;
            let w = tape.gather(w_dense, d.flat.clone())?;
            let sample = AttentionSample {
                pattern: support.pattern.clone(),
                mode,
                phi: phi_c,
                s: w,
                w,
                eps: None,
            };
            return Ok((sample, o));
        }
    }
    let eps = if training && mode.is_stochastic() {
        Some(eps.ok_or_else(|| BamError::Parameter("stochastic attention needs noise while training".into()))?)
    } else {
        None
    };
    let sample = attention_weights(tape, phi_c, &support.pattern, mode, eps)?;
    let w = match active_dropout {
        Some(d) => tape.dropout(sample.w, d.p, d.rng, true)?,
        None => sample.w,
    };
    let o = support.aggregate(tape, w, v)?;
    Ok((sample, o))
}

/// Projections of one head. The additive score also needs `a_q`, `a_k`.
#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub m_q: Var,
    pub m_k: Var,
    pub m_v: Var,
    pub additive: Option<AdditiveParams>,
}

/// Per-head results of a layer.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub sample: AttentionSample,
    pub out: Var,
}

/// Which randomness a forward pass uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardMode {
    /// Sample attention weights (otherwise substitute expectations).
    pub sample: bool,
    /// Apply dropout layers.
    pub dropout: bool,
}

impl ForwardMode {
    pub const TRAIN: ForwardMode = ForwardMode { sample: true, dropout: true };
    pub const EVAL: ForwardMode = ForwardMode { sample: false, dropout: false };

    pub fn posterior(dropout: bool) -> Self {
        ForwardMode { sample: true, dropout }
    }
}

/// Noise for every head of a layer, drawn head by head.
pub fn draw_layer_noise(
    mode: AttentionMode,
    heads: usize,
    entries: usize,
    rng: &mut dyn RngCore,
) -> Vec<Option<Vec<f64>>> {
    (0..heads).map(|_| mode.draw_noise(rng, entries)).collect()
}

/// Query, key and value rows of one head.
#[derive(Clone, Copy, Debug)]
pub struct HeadProjections {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub additive: Option<AdditiveParams>,
}

/// Multi-head attention; head outputs are concatenated along features.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_layer(
    tape: &mut Tape,
    x_q: Var,
    x_kv: Var,
    heads: &[HeadParams],
    cfg: &AttentionConfig,
    support: &Support,
    eps: &[Option<Vec<f64>>],
    fwd: ForwardMode,
    rng: &mut dyn RngCore,
) -> Result<(Var, Vec<HeadOutput>)> {
    let mut projections = Vec::with_capacity(heads.len());
    for head in heads {
        for (proj, width) in [(head.m_q, cfg.d_k), (head.m_k, cfg.d_k), (head.m_v, cfg.d_v)] {
            if tape.shape(proj).len() != 2 || tape.shape(proj)[1] != width {
                return Err(BamError::Dimension(format!(
                    "projection of shape {:?} where width {width} is configured",
                    tape.shape(proj)
                )));
            }
        }
        let q = tape.matmul(x_q, head.m_q)?;
        let k = tape.matmul(x_kv, head.m_k)?;
        let v = tape.matmul(x_kv, head.m_v)?;
        projections.push(HeadProjections {
            q,
            k,
            v,
            additive: head.additive,
        });
    }
    attend_heads(tape, &projections, cfg, support, eps, fwd, rng)
}

/// Multi-head attention from already projected queries, keys and values.
pub fn attend_heads(
    tape: &mut Tape,
    heads: &[HeadProjections],
    cfg: &AttentionConfig,
    support: &Support,
    eps: &[Option<Vec<f64>>],
    fwd: ForwardMode,
    rng: &mut dyn RngCore,
) -> Result<(Var, Vec<HeadOutput>)> {
    cfg.validate()?;
    if heads.len() != cfg.heads || eps.len() != cfg.heads {
        return Err(BamError::Dimension(format!(
            "{} head parameter sets and {} noise sets for {} heads",
            heads.len(),
            eps.len(),
            cfg.heads
        )));
    }
    let mut outputs = Vec::with_capacity(heads.len());
    for (head, noise) in heads.iter().zip(eps) {
        let HeadProjections { q, k, v, additive } = *head;
        if tape.shape(q)[1] != cfg.d_k || tape.shape(k)[1] != cfg.d_k || tape.shape(v)[1] != cfg.d_v {
            return Err(BamError::Dimension(format!(
                "projections {:?}, {:?}, {:?} for d_k = {}, d_v = {}",
                tape.shape(q),
                tape.shape(k),
                tape.shape(v),
                cfg.d_k,
                cfg.d_v
            )));
        }
        let phi = score(tape, q, k, cfg.score_fn, additive, support)?;
        let dropout = if fwd.dropout && cfg.weight_dropout > 0.0 {
            Some(WeightDropout {
                p: cfg.weight_dropout,
                rng: &mut *rng,
            })
        } else {
            None
        };
        let (sample, out) = stochastic_attention(tape, phi, v, cfg.mode, support, noise.as_deref(), fwd.sample, dropout)?;
        outputs.push(HeadOutput { q, k, v, sample, out });
    }
    let outs: Vec<Var> = outputs.iter().map(|h| h.out).collect();
    let concat = tape.concat(&outs, 1)?;
    Ok((concat, outputs))
}

/// One layer of a stack.
#[derive(Clone, Debug)]
pub struct LayerSpec {
    pub cfg: AttentionConfig,
    pub heads: Vec<HeadParams>,
    pub support: Support,
}

/// Runs layers in sequence. Queries of layer `l+1` come from the realized
/// output of layer `l`; keys and values come from `context` when given,
/// otherwise from that same output (self-attention).
pub fn stack_layers(
    tape: &mut Tape,
    input: Var,
    context: Option<Var>,
    layers: &[LayerSpec],
    eps: &[Vec<Option<Vec<f64>>>],
    fwd: ForwardMode,
    rng: &mut dyn RngCore,
) -> Result<(Var, Vec<Vec<HeadOutput>>)> {
    if eps.len() != layers.len() {
        return Err(BamError::Dimension(format!(
            "noise for {} layers, {} layers given",
            eps.len(),
            layers.len()
        )));
    }
    let mut x = input;
    let mut all = Vec::with_capacity(layers.len());
    for (layer, noise) in layers.iter().zip(eps) {
        let kv = context.unwrap_or(x);
        let (out, heads) = multi_head_layer(tape, x, kv, &layer.heads, &layer.cfg, &layer.support, noise, fwd, rng)?;
        x = out;
        all.push(heads);
    }
    Ok((x, all))
}

/// Noise for an entire stack, drawn layer by layer when sampling.
pub fn draw_stack_noise(layers: &[LayerSpec], fwd: ForwardMode, rng: &mut dyn RngCore) -> Vec<Vec<Option<Vec<f64>>>> {
    layers
        .iter()
        .map(|l| {
            if fwd.sample {
                draw_layer_noise(l.cfg.mode, l.cfg.heads, l.support.nnz(), rng)
            } else {
                vec![None; l.cfg.heads]
            }
        })
        .collect()
}
