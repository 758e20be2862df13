//! Priors over the unnormalized attention weights and the per-layer KL term.
//!
//! The contextual prior computes one positive weight per key,
//! `Ψ = softmax_keys(F₂(ReLU(F₁(K))))`, and uses it as the Gamma shape (or
//! Lognormal location) of every entry in that key's column.

use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMode, AttentionSample};
use crate::autodiff::{Pattern, Tape, Tensor, Var};
use crate::distributions::Density;
use crate::error::{BamError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    None,
    Fixed,
    Contextual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorFamily {
    Gamma,
    Lognormal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub kind: PriorKind,
    pub family: PriorFamily,
    /// Gamma rate.
    pub beta: f64,
    /// Lognormal prior scale.
    pub sigma1: f64,
    pub alpha_fixed: f64,
    pub mu_fixed: f64,
    /// Hidden width of the contextual prior network.
    pub d_mid: usize,
    /// One prior network per layer instead of one per head.
    pub share_heads: bool,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            kind: PriorKind::None,
            family: PriorFamily::Gamma,
            beta: 1.0,
            sigma1: 1.0,
            alpha_fixed: 1.0,
            mu_fixed: 0.0,
            d_mid: 1,
            share_heads: false,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(BamError::Config(format!("prior.{name} must be positive, got {v}")))
            }
        };
        if self.kind == PriorKind::None {
            return Ok(());
        }
        match self.family {
            PriorFamily::Gamma => {
                positive("beta", self.beta)?;
                if self.kind == PriorKind::Fixed {
                    positive("alpha_fixed", self.alpha_fixed)?;
                }
            }
            PriorFamily::Lognormal => {
                positive("sigma1", self.sigma1)?;
                if !self.mu_fixed.is_finite() {
                    return Err(BamError::Config("prior.mu_fixed must be finite".into()));
                }
            }
        }
        if self.kind == PriorKind::Contextual && self.d_mid == 0 {
            return Err(BamError::Config("prior.d_mid must be at least 1".into()));
        }
        Ok(())
    }

    /// Whether a KL term is formed at all for this attention mode.
    pub fn has_kl(&self, mode: AttentionMode) -> bool {
        self.kind != PriorKind::None && mode.is_stochastic()
    }

    /// Weibull posteriors pair with Gamma priors, Lognormal with Lognormal.
    pub fn check_pairing(&self, mode: AttentionMode) -> Result<()> {
        if !self.has_kl(mode) {
            return Ok(());
        }
        match (mode, self.family) {
            (AttentionMode::Weibull { .. }, PriorFamily::Gamma)
            | (AttentionMode::Lognormal { .. }, PriorFamily::Lognormal) => Ok(()),
            (mode, family) => Err(BamError::Config(format!(
                "attention.mode = {} cannot be paired with prior.family = {}",
                mode_name(mode),
                family_name(family)
            ))),
        }
    }
}

fn mode_name(mode: AttentionMode) -> &'static str {
    match mode {
        AttentionMode::Deterministic => "deterministic",
        AttentionMode::Weibull { .. } => "weibull",
        AttentionMode::Lognormal { .. } => "lognormal",
    }
}

fn family_name(family: PriorFamily) -> &'static str {
    match family {
        PriorFamily::Gamma => "gamma",
        PriorFamily::Lognormal => "lognormal",
    }
}

/// Weights of one contextual prior network.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextualPriorNet {
    pub f1_w: Tensor,
    pub f1_b: Tensor,
    pub f2_w: Tensor,
    pub f2_b: Tensor,
}

impl ContextualPriorNet {
    /// Glorot-initialized weights, zero biases.
    pub fn init(d_k: usize, d_mid: usize, rng: &mut dyn RngCore) -> Result<Self> {
        if d_mid == 0 {
            return Err(BamError::Parameter("d_mid must be at least 1".into()));
        }
        Ok(ContextualPriorNet {
            f1_w: Tensor::glorot(d_k, d_mid, rng)?,
            f1_b: Tensor::zeros(vec![1, d_mid])?,
            f2_w: Tensor::glorot(d_mid, 1, rng)?,
            f2_b: Tensor::zeros(vec![1, 1])?,
        })
    }

    pub fn zeros(d_k: usize, d_mid: usize) -> Result<Self> {
        Ok(ContextualPriorNet {
            f1_w: Tensor::zeros(vec![d_k, d_mid])?,
            f1_b: Tensor::zeros(vec![1, d_mid])?,
            f2_w: Tensor::zeros(vec![d_mid, 1])?,
            f2_b: Tensor::zeros(vec![1, 1])?,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.f1_w.len() + self.f1_b.len() + self.f2_w.len() + self.f2_b.len()
    }
}

/// A prior network's weights on a tape.
#[derive(Clone, Copy, Debug)]
pub struct PriorNetVars {
    pub f1_w: Var,
    pub f1_b: Var,
    pub f2_w: Var,
    pub f2_b: Var,
}

impl PriorNetVars {
    pub fn bind(tape: &mut Tape, net: &ContextualPriorNet) -> Self {
        PriorNetVars {
            f1_w: tape.param(net.f1_w.clone()),
            f1_b: tape.param(net.f1_b.clone()),
            f2_w: tape.param(net.f2_w.clone()),
            f2_b: tape.param(net.f2_b.clone()),
        }
    }
}

/// `Ψ` as an `n×1` column for keys `K` (`n×d_k`). The keys are split into
/// `segments` equal consecutive blocks and the softmax runs within each
/// block, so a batch of instances gets one distribution per instance.
pub fn contextual_psi(tape: &mut Tape, k: Var, net: &PriorNetVars, segments: usize) -> Result<Var> {
    let shape = tape.shape(k).to_vec();
    let d_k = tape.shape(net.f1_w)[0];
    if shape.len() != 2 || shape[1] != d_k {
        return Err(BamError::Dimension(format!(
            "keys of shape {shape:?} for a prior network expecting {d_k} features"
        )));
    }
    let n = shape[0];
    if segments == 0 || !n.is_multiple_of(segments) {
        return Err(BamError::Dimension(format!("{n} keys cannot form {segments} equal segments")));
    }
    let h = tape.matmul(k, net.f1_w)?;
    let h = tape.add(h, net.f1_b)?;
    let h = tape.relu(h);
    let logits = tape.matmul(h, net.f2_w)?;
    let logits = tape.add(logits, net.f2_b)?;
    let blocks = tape.reshape(logits, vec![segments, n / segments])?;
    let psi = tape.softmax_rows(blocks, None)?;
    tape.reshape(psi, vec![n, 1])
}

/// Prior parameters at every entry of an attention pattern.
#[derive(Clone, Copy, Debug)]
pub enum PriorParams {
    Gamma { alpha: Var, beta: f64 },
    Lognormal { mu: Var, sigma: f64 },
}

/// Prior parameters over `pattern`. Contextual priors read `Ψ` by key index:
/// entry `(i, j)` gets `Ψ_j` for every query `i`.
pub fn prior_params(tape: &mut Tape, psi: Option<Var>, cfg: &PriorConfig, pattern: &Pattern) -> Result<PriorParams> {
    cfg.validate()?;
    let per_entry = match cfg.kind {
        PriorKind::None => return Err(BamError::Config("prior.kind = none has no KL term".into())),
        PriorKind::Fixed => {
            let value = match cfg.family {
                PriorFamily::Gamma => cfg.alpha_fixed,
                PriorFamily::Lognormal => cfg.mu_fixed,
            };
            tape.constant(Tensor::filled(vec![pattern.nnz()], value)?)
        }
        PriorKind::Contextual => {
            let psi = psi.ok_or_else(|| BamError::Config("contextual prior needs Ψ".into()))?;
            if tape.value(psi).len() != pattern.n() {
                return Err(BamError::Dimension(format!(
                    "Ψ has {} entries for {} keys",
                    tape.value(psi).len(),
                    pattern.n()
                )));
            }
            tape.gather(psi, Arc::new(pattern.col_ids().to_vec()))?
        }
    };
    Ok(match cfg.family {
        PriorFamily::Gamma => PriorParams::Gamma {
            alpha: per_entry,
            beta: cfg.beta,
        },
        PriorFamily::Lognormal => PriorParams::Lognormal {
            mu: per_entry,
            sigma: cfg.sigma1,
        },
    })
}

/// Sum over the entries of a layer's sample of the analytic KL from prior to
/// variational distribution, evaluated at the realized posterior parameters.
pub fn layer_kl(tape: &mut Tape, sample: &AttentionSample, prior: &PriorParams) -> Result<Var> {
    let loc = sample.posterior_location(tape)?;
    match (sample.mode, *prior) {
        (AttentionMode::Weibull { k }, PriorParams::Gamma { alpha, beta }) => tape.kl_weibull_gamma(loc, alpha, k, beta),
        (AttentionMode::Lognormal { sigma }, PriorParams::Lognormal { mu, sigma: sigma1 }) => {
            tape.kl_lognormal(loc, mu, sigma, sigma1)
        }
        (mode, prior) => Err(BamError::Config(format!(
            "posterior {mode:?} cannot be paired with prior {prior:?}"
        ))),
    }
}

/// Unshifted unnormalized weights `S` of a sampled layer.
pub fn sampled_s(tape: &Tape, sample: &AttentionSample) -> Result<Vec<f64>> {
    let eps = sample
        .eps
        .as_ref()
        .ok_or_else(|| BamError::Config("the expectation was substituted; nothing was sampled".into()))?;
    let phi = tape.value(sample.phi).data();
    match sample.mode {
        AttentionMode::Weibull { k } => {
            let c = sample.mode.log_mean_factor()?;
            phi.iter()
                .zip(eps)
                .map(|(&p, &e)| Ok((p - c).exp() * crate::distributions::weibull_unit_draw(k, e)?))
                .collect()
        }
        AttentionMode::Lognormal { sigma } => Ok(phi
            .iter()
            .zip(eps)
            .map(|(&p, &e)| (p - 0.5 * sigma * sigma + sigma * e).exp())
            .collect()),
        AttentionMode::Deterministic => Err(BamError::Config("deterministic attention is not sampled".into())),
    }
}

/// `Σ [ln q(S) − ln p(S)]` at the sampled `S` of a layer: the fully sampled
/// counterpart of [`layer_kl`].
pub fn sampled_log_ratio(tape: &Tape, sample: &AttentionSample, prior: &PriorParams) -> Result<f64> {
    let s = sampled_s(tape, sample)?;
    let phi = tape.value(sample.phi).data();
    let mut total = 0.0;
    for (e, (&x, &p)) in s.iter().zip(phi).enumerate() {
        let (q, pr) = match (sample.mode, *prior) {
            (AttentionMode::Weibull { k }, PriorParams::Gamma { alpha, beta }) => (
                Density::Weibull {
                    k,
                    lambda: (p - sample.mode.log_mean_factor()?).exp(),
                },
                Density::Gamma {
                    alpha: tape.value(alpha).data()[e],
                    beta,
                },
            ),
            (AttentionMode::Lognormal { sigma }, PriorParams::Lognormal { mu, sigma: sigma1 }) => (
                Density::Lognormal {
                    mu: p - 0.5 * sigma * sigma,
                    sigma,
                },
                Density::Lognormal {
                    mu: tape.value(mu).data()[e],
                    sigma: sigma1,
                },
            ),
            (mode, prior) => {
                return Err(BamError::Config(format!(
                    "posterior {mode:?} cannot be paired with prior {prior:?}"
                )))
            }
        };
        total += q.log_pdf(x)? - pr.log_pdf(x)?;
    }
    Ok(total)
}
