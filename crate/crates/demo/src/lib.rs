//! Browser bindings: attention weights of one query row, the Weibull-Gamma KL
//! as a function of the scale, and the lognormal deterministic limit.

use std::sync::Arc;

use bam_core::attention::{attention_weights, AttentionMode};
use bam_core::autodiff::{Pattern, Tape, Tensor};
use bam_core::distributions::kl_weibull_gamma_log;
use bam_core::{BamError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Parses `"deterministic"`, `"weibull"` (parameter `k`) or `"lognormal"`
/// (parameter `σ`).
pub fn parse_mode(name: &str, param: f64) -> Result<AttentionMode> {
    let mode = match name {
        "deterministic" => AttentionMode::Deterministic,
        "weibull" => AttentionMode::Weibull { k: param },
        "lognormal" => AttentionMode::Lognormal { sigma: param },
        other => return Err(BamError::Config(format!("unknown attention mode {other:?}"))),
    };
    mode.validate()?;
    Ok(mode)
}

fn row_pattern(keys: usize, masked: &[bool]) -> Result<Arc<Pattern>> {
    if masked.len() != keys {
        return Err(BamError::Dimension(format!("{} mask flags for {keys} keys", masked.len())));
    }
    let pattern = Pattern::from_entries(1, keys, (0..keys).filter(|&j| !masked[j]).map(|j| (0, j)))?;
    pattern.ensure_rows_nonempty()?;
    Ok(Arc::new(pattern))
}

/// Weights of one query row: the expected weights, then `draws` sampled rows,
/// each over all keys with zeros at masked keys. Draws are reproducible per
/// `seed`.
pub fn sample_row(scores: &[f64], masked: &[bool], mode: AttentionMode, draws: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let pattern = row_pattern(scores.len(), masked)?;
    let compact: Vec<f64> = pattern.col_ids().iter().map(|&j| scores[j]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(draws + 1);
    for d in 0..=draws {
        let eps = if d == 0 { None } else { mode.draw_noise(&mut rng, pattern.nnz()) };
        let mut tape = Tape::new();
        let phi = tape.constant(Tensor::vector(compact.clone())?);
        let sample = attention_weights(&mut tape, phi, &pattern, mode, eps.as_deref())?;
        let mut row = vec![0.0; scores.len()];
        for (&j, &w) in pattern.col_ids().iter().zip(tape.value(sample.w).data()) {
            row[j] = w;
        }
        rows.push(row);
    }
    Ok(rows)
}

/// KL(Weibull(k, λ) ‖ Gamma(α, β)) at `points` scales spaced evenly in `ln λ`
/// from `lo` to `hi`.
pub fn kl_curve(k: f64, alpha: f64, beta: f64, lo: f64, hi: f64, points: usize) -> Result<Vec<(f64, f64)>> {
    if !(lo > 0.0 && hi > lo) || points < 2 {
        return Err(BamError::Config(format!(
            "need 0 < lo < hi and at least two points, got [{lo}, {hi}] with {points}"
        )));
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..points)
        .map(|i| {
            let ll = a + (b - a) * i as f64 / (points - 1) as f64;
            Ok((ll.exp(), kl_weibull_gamma_log(k, ll, alpha, beta)?))
        })
        .collect()
}

/// Largest absolute difference between lognormal sampled weights and the
/// softmax of `scores`, over `draws` draws for each `σ`.
pub fn limit_gap(scores: &[f64], sigmas: &[f64], draws: usize, seed: u64) -> Result<Vec<f64>> {
    let masked = vec![false; scores.len()];
    sigmas
        .iter()
        .map(|&sigma| {
            let rows = sample_row(scores, &masked, parse_mode("lognormal", sigma)?, draws, seed)?;
            let expected = &rows[0];
            Ok(rows[1..]
                .iter()
                .flat_map(|r| r.iter().zip(expected).map(|(a, b)| (a - b).abs()))
                .fold(0.0, f64::max))
        })
        .collect()
}

fn js_err(e: BamError) -> JsError {
    JsError::new(&e.to_string())
}

/// `sample_row` flattened to `(draws + 1) × keys`; `masked` holds one flag
/// per key, nonzero meaning masked.
#[wasm_bindgen(js_name = sampleAttention)]
pub fn sample_attention_js(
    scores: Vec<f64>,
    masked: Vec<u8>,
    mode: &str,
    param: f64,
    draws: usize,
    seed: u64,
) -> std::result::Result<Vec<f64>, JsError> {
    let masked: Vec<bool> = masked.iter().map(|&m| m != 0).collect();
    let mode = parse_mode(mode, param).map_err(js_err)?;
    let rows = sample_row(&scores, &masked, mode, draws, seed).map_err(js_err)?;
    Ok(rows.concat())
}

/// `kl_curve` flattened to `[λ₀, KL₀, λ₁, KL₁, …]`.
#[wasm_bindgen(js_name = klCurve)]
pub fn kl_curve_js(k: f64, alpha: f64, beta: f64, lo: f64, hi: f64, points: usize) -> std::result::Result<Vec<f64>, JsError> {
    let curve = kl_curve(k, alpha, beta, lo, hi, points).map_err(js_err)?;
    Ok(curve.into_iter().flat_map(|(l, kl)| [l, kl]).collect())
}

#[wasm_bindgen(js_name = limitGap)]
pub fn limit_gap_js(scores: Vec<f64>, sigmas: Vec<f64>, draws: usize, seed: u64) -> std::result::Result<Vec<f64>, JsError> {
    limit_gap(&scores, &sigmas, draws, seed).map_err(js_err)
}
