//! Reparameterizable Weibull and Lognormal samplers, the Gamma prior
//! density, and the closed-form KL divergences used by the attention KL term.
//!
//! Parameterizations:
//! * `Weibull(k, λ)`: density `k/λ^k s^{k-1} exp(-(s/λ)^k)`, sampled as
//!   `λ (-ln(1-ε))^{1/k}` with `ε ~ Uniform(0, 1)`.
//! * `Lognormal(μ, σ)`: density of `exp(N(μ, σ²))`, sampled as `exp(εσ + μ)`
//!   with `ε ~ N(0, 1)`.
//! * `Gamma(α, β)`: shape `α`, rate `β`.

pub mod special;

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::{BamError, Result};
use special::{gamma_fn, lgamma, EULER_GAMMA};

/// Bounds applied to uniform noise before `-ln(1 - ε)`.
pub const UNIFORM_CLAMP: (f64, f64) = (1e-12, 1.0 - 1e-12);

fn positive(name: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(BamError::Domain(format!("{name} must be positive and finite, got {v}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeibullParams {
    k: f64,
    lambda: Vec<f64>,
}

impl WeibullParams {
    pub fn new(k: f64, lambda: Vec<f64>) -> Result<Self> {
        positive("Weibull shape k", k)?;
        for &l in &lambda {
            positive("Weibull scale lambda", l)?;
        }
        Ok(WeibullParams { k, lambda })
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LognormalParams {
    mu: Vec<f64>,
    sigma: f64,
}

impl LognormalParams {
    pub fn new(mu: Vec<f64>, sigma: f64) -> Result<Self> {
        positive("Lognormal sigma", sigma)?;
        Ok(LognormalParams { mu, sigma })
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GammaParams {
    alpha: Vec<f64>,
    beta: f64,
}

impl GammaParams {
    pub fn new(alpha: Vec<f64>, beta: f64) -> Result<Self> {
        positive("Gamma rate beta", beta)?;
        for &a in &alpha {
            positive("Gamma shape alpha", a)?;
        }
        Ok(GammaParams { alpha, beta })
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

/// A single univariate density on `(0, ∞)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Density {
    Weibull { k: f64, lambda: f64 },
    Lognormal { mu: f64, sigma: f64 },
    Gamma { alpha: f64, beta: f64 },
}

impl Density {
    fn validate(&self) -> Result<()> {
        match *self {
            Density::Weibull { k, lambda } => {
                positive("k", k)?;
                positive("lambda", lambda)?;
            }
            Density::Lognormal { sigma, mu } => {
                positive("sigma", sigma)?;
                if !mu.is_finite() {
                    return Err(BamError::Domain(format!("mu must be finite, got {mu}")));
                }
            }
            Density::Gamma { alpha, beta } => {
                positive("alpha", alpha)?;
                positive("beta", beta)?;
            }
        }
        Ok(())
    }

    pub fn log_pdf(&self, s: f64) -> Result<f64> {
        self.validate()?;
        if !(s > 0.0) {
            return Err(BamError::Domain(format!("density support is s > 0, got {s}")));
        }
        Ok(match *self {
            Density::Weibull { k, lambda } => {
                k.ln() - k * lambda.ln() + (k - 1.0) * s.ln() - (s / lambda).powf(k)
            }
            Density::Lognormal { mu, sigma } => {
                let z = (s.ln() - mu) / sigma;
                -s.ln() - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * z * z
            }
            Density::Gamma { alpha, beta } => {
                alpha * beta.ln() - lgamma(alpha)? + (alpha - 1.0) * s.ln() - beta * s
            }
        })
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Density::Weibull { k, lambda } => lambda * gamma_fn(1.0 + 1.0 / k),
            Density::Lognormal { mu, sigma } => (mu + 0.5 * sigma * sigma).exp(),
            Density::Gamma { alpha, beta } => alpha / beta,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            Density::Weibull { k, lambda } => {
                let g1 = gamma_fn(1.0 + 1.0 / k);
                lambda * lambda * (gamma_fn(1.0 + 2.0 / k) - g1 * g1)
            }
            Density::Lognormal { mu, sigma } => {
                let s2 = sigma * sigma;
                s2.exp_m1() * (2.0 * mu + s2).exp()
            }
            Density::Gamma { alpha, beta } => alpha / (beta * beta),
        }
    }

    /// Closed-form CDF for the two sampled families; Gamma is only ever a
    /// prior and has no CDF here.
    pub fn cdf(&self, s: f64) -> Result<f64> {
        self.validate()?;
        if s <= 0.0 {
            return Ok(0.0);
        }
        match *self {
            Density::Weibull { k, lambda } => Ok(-(-(s / lambda).powf(k)).exp_m1()),
            Density::Lognormal { mu, sigma } => {
                let z = (s.ln() - mu) / sigma;
                Ok(standard_normal_cdf(z))
            }
            Density::Gamma { .. } => Err(BamError::Domain(
                "gamma CDF is not provided".into(),
            )),
        }
    }
}

/// `Φ(z)`, accurate to about 1e-7.
fn standard_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Complementary error function, Chebyshev fit with relative error below 1.2e-7.
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t
        * (-z * z - 1.265_512_23
            + t * (1.000_023_68
                + t * (0.374_091_96
                    + t * (0.096_784_18
                        + t * (-0.186_288_06
                            + t * (0.278_868_07
                                + t * (-1.135_203_98
                                    + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77)))))))))
            .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

/// Clamps uniform noise into `[1e-12, 1 - 1e-12]`; values outside `[0, 1]`
/// are rejected.
pub fn clamp_uniform(eps: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(BamError::Domain(format!("uniform noise {eps} outside (0, 1)")));
    }
    Ok(eps.clamp(UNIFORM_CLAMP.0, UNIFORM_CLAMP.1))
}

/// `(-ln(1 - ε))^{1/k}`: the unit-scale Weibull draw for noise `ε`.
pub fn weibull_unit_draw(k: f64, eps: f64) -> Result<f64> {
    let e = clamp_uniform(eps)?;
    Ok((-(-e).ln_1p()).powf(1.0 / k))
}

pub fn weibull_sample(params: &WeibullParams, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != params.lambda.len() {
        return Err(BamError::Dimension(format!(
            "{} noise values for {} scales",
            eps.len(),
            params.lambda.len()
        )));
    }
    params
        .lambda
        .iter()
        .zip(eps)
        .map(|(&l, &e)| Ok(l * weibull_unit_draw(params.k, e)?))
        .collect()
}

pub fn lognormal_sample(params: &LognormalParams, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != params.mu.len() {
        return Err(BamError::Dimension(format!(
            "{} noise values for {} locations",
            eps.len(),
            params.mu.len()
        )));
    }
    Ok(params
        .mu
        .iter()
        .zip(eps)
        .map(|(&m, &e)| (e * params.sigma + m).exp())
        .collect())
}

/// Pathwise Weibull sample on the tape: differentiable in `lambda` with the
/// noise held fixed.
pub fn weibull_sample_var(tape: &mut Tape, lambda: Var, k: f64, eps: &[f64]) -> Result<Var> {
    positive("Weibull shape k", k)?;
    let draws = eps
        .iter()
        .map(|&e| weibull_unit_draw(k, e))
        .collect::<Result<Vec<_>>>()?;
    tape.mul_const(lambda, Arc::new(draws))
}

/// Pathwise Lognormal sample on the tape: differentiable in `mu`.
pub fn lognormal_sample_var(tape: &mut Tape, mu: Var, sigma: f64, eps: &[f64]) -> Result<Var> {
    positive("Lognormal sigma", sigma)?;
    let shift: Vec<f64> = eps.iter().map(|&e| e * sigma).collect();
    let z = tape.add_const(mu, Arc::new(shift))?;
    Ok(tape.exp(z))
}

pub fn draw_uniform<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

pub fn draw_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// KL(Weibull(k, λ) || Gamma(α, β)) with the scale given as `ln λ`.
pub fn kl_weibull_gamma_log(k: f64, log_lambda: f64, alpha: f64, beta: f64) -> Result<f64> {
    WeibullGammaKl::new(k, beta)?.eval(log_lambda, alpha)
}

/// KL(Weibull(k, λ) || Gamma(α, β)) for fixed `k` and `β`, with the terms
/// that depend on them alone computed once.
#[derive(Clone, Copy, Debug)]
pub struct WeibullGammaKl {
    k: f64,
    beta: f64,
    ln_k: f64,
    ln_beta: f64,
    mean_factor: f64,
}

impl WeibullGammaKl {
    pub fn new(k: f64, beta: f64) -> Result<Self> {
        positive("k", k)?;
        positive("beta", beta)?;
        Ok(WeibullGammaKl {
            k,
            beta,
            ln_k: k.ln(),
            ln_beta: beta.ln(),
            mean_factor: gamma_fn(1.0 + 1.0 / k),
        })
    }

    pub fn eval(&self, log_lambda: f64, alpha: f64) -> Result<f64> {
        positive("alpha", alpha)?;
        if !log_lambda.is_finite() {
            return Err(BamError::Domain(format!("ln lambda must be finite, got {log_lambda}")));
        }
        Ok(EULER_GAMMA * alpha / self.k - alpha * log_lambda + self.ln_k
            + self.beta * log_lambda.exp() * self.mean_factor
            - EULER_GAMMA
            - 1.0
            - alpha * self.ln_beta
            + lgamma(alpha)?)
    }
}

/// KL(Weibull(k, λ) || Gamma(α, β)).
pub fn kl_weibull_gamma(k: f64, lambda: f64, alpha: f64, beta: f64) -> Result<f64> {
    positive("lambda", lambda)?;
    kl_weibull_gamma_log(k, lambda.ln(), alpha, beta)
}

/// KL(Lognormal(μ₁, σ₁²) || Lognormal(μ₂, σ₂²)).
pub fn kl_lognormal_lognormal(mu1: f64, sigma1: f64, mu2: f64, sigma2: f64) -> Result<f64> {
    positive("sigma1", sigma1)?;
    positive("sigma2", sigma2)?;
    let d = mu1 - mu2;
    Ok((sigma2 / sigma1).ln() + (sigma1 * sigma1 + d * d) / (2.0 * sigma2 * sigma2) - 0.5)
}

/// Elementwise KL for tensors of Weibull and Gamma parameters.
pub fn kl_weibull_gamma_all(q: &WeibullParams, p: &GammaParams) -> Result<Vec<f64>> {
    if q.lambda.len() != p.alpha.len() {
        return Err(BamError::Dimension(format!(
            "{} Weibull scales against {} Gamma shapes",
            q.lambda.len(),
            p.alpha.len()
        )));
    }
    q.lambda
        .iter()
        .zip(&p.alpha)
        .map(|(&l, &a)| kl_weibull_gamma(q.k, l, a, p.beta))
        .collect()
}

/// Elementwise log density over a tensor of points.
pub fn log_pdf(density: &[Density], s: &[f64]) -> Result<Vec<f64>> {
    if density.len() != s.len() {
        return Err(BamError::Dimension(format!(
            "{} densities for {} points",
            density.len(),
            s.len()
        )));
    }
    density.iter().zip(s).map(|(d, &x)| d.log_pdf(x)).collect()
}

/// `Γ(1 + 1/k)`, the factor relating the Weibull mean to its scale.
pub fn weibull_mean_factor(k: f64) -> Result<f64> {
    positive("k", k)?;
    Ok(gamma_fn(1.0 + 1.0 / k))
}
