#![allow(dead_code)]

use bam_core::autodiff::check::check_gradients;
use bam_core::autodiff::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: Vec<usize>, seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed)).unwrap()
}

pub fn assert_grad(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> bam_core::Result<Var>) {
    let report = check_gradients(inputs, H, f).unwrap();
    assert!(
        report.max_rel_error < TOL,
        "max relative error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

/// Sum of `x` weighted entrywise by fixed random weights.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> bam_core::Result<Var> {
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(random(shape, seed));
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
