//! Numerical verification suites: closed-form KLs against quadrature,
//! objective gradients against finite differences, the deterministic limit,
//! the layer-wise analytic KL against Monte Carlo, and simplex invariants.

use std::fmt;
use std::str::FromStr;

use bam_core::attention::{stochastic_attention, AttentionConfig, AttentionMode, ForwardMode, ScoreFn, Support};
use bam_core::autodiff::check::{check_gradients, rel_error};
use bam_core::autodiff::{Mask, Tape, Tensor, Var};
use bam_core::data::{synthetic_citation_graph, CitationParams};
use bam_core::distributions::{kl_lognormal_lognormal, kl_weibull_gamma, Density};
use bam_core::models::{AttentionClassifier, ClassifierConfig, GatConfig, GraphModel, SeqBatch};
use bam_core::objective::{loss, Model};
use bam_core::params::{ParamGroup, ParamStore};
use bam_core::prior::{layer_kl, prior_params, sampled_log_ratio, PriorConfig, PriorFamily, PriorKind};
use bam_core::quadrature::kl_by_quadrature;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{CliError, Result};

/// One verified quantity: `error` must not exceed `tolerance`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub suite: Suite,
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl Check {
    fn new(suite: Suite, name: impl Into<String>, error: f64, tolerance: f64) -> Self {
        Check {
            suite,
            name: name.into(),
            error,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} [{}] {}: error {:.3e}, tolerance {:.1e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.error,
            self.tolerance
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Kl,
    Grad,
    Limit,
    RaoBlackwell,
    Simplex,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Kl, Suite::Grad, Suite::Limit, Suite::RaoBlackwell, Suite::Simplex];

    pub fn run(self) -> Result<Vec<Check>> {
        match self {
            Suite::Kl => kl_suite(),
            Suite::Grad => grad_suite(),
            Suite::Limit => limit_suite(),
            Suite::RaoBlackwell => rao_blackwell_suite(MC_DRAWS, VARIANCE_DRAWS),
            Suite::Simplex => simplex_suite(SIMPLEX_PASSES),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Kl => "kl",
            Suite::Grad => "grad",
            Suite::Limit => "limit",
            Suite::RaoBlackwell => "rao-blackwell",
            Suite::Simplex => "simplex",
        })
    }
}

impl FromStr for Suite {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.to_string() == s)
            .ok_or_else(|| CliError::Config(format!("unknown verification suite {s:?}")))
    }
}

pub const KL_TOL_WEIBULL: f64 = 1e-5;
pub const KL_TOL_LOGNORMAL: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;
pub const LIMIT_SIGMA: f64 = 1e-8;
pub const LIMIT_TOL: f64 = 1e-6;
pub const MC_DRAWS: usize = 100_000;
pub const MC_STANDARD_ERRORS: f64 = 3.0;
pub const VARIANCE_DRAWS: usize = 4000;
pub const SIMPLEX_PASSES: usize = 10_000;
pub const SIMPLEX_TOL: f64 = 1e-9;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: Vec<usize>, seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed)).expect("nonempty shape")
}

/// Relative error with a floor for KLs that vanish at matching parameters.
fn kl_rel(formula: f64, quad: f64) -> f64 {
    (formula - quad).abs() / quad.abs().max(1e-9)
}

fn kl_suite() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for k in [0.5, 1.0, 2.0, 5.0] {
        for lambda in [0.1, 1.0, 10.0] {
            for alpha in [0.5, 1.0, 2.0] {
                for beta in [0.5, 1.0, 2.0] {
                    let formula = kl_weibull_gamma(k, lambda, alpha, beta)?;
                    let quad = kl_by_quadrature(&Density::Weibull { k, lambda }, &Density::Gamma { alpha, beta })?;
                    checks.push(Check::new(
                        Suite::Kl,
                        format!("Weibull(k={k}, λ={lambda}) ‖ Gamma(α={alpha}, β={beta})"),
                        kl_rel(formula, quad),
                        KL_TOL_WEIBULL,
                    ));
                }
            }
        }
    }
    for mu1 in [-1.5, 0.0, 0.8] {
        for s1 in [0.2, 1.0, 1.7] {
            for mu2 in [-0.5, 0.0, 2.0] {
                for s2 in [0.3, 1.0, 2.5] {
                    let formula = kl_lognormal_lognormal(mu1, s1, mu2, s2)?;
                    let quad = kl_by_quadrature(
                        &Density::Lognormal { mu: mu1, sigma: s1 },
                        &Density::Lognormal { mu: mu2, sigma: s2 },
                    )?;
                    checks.push(Check::new(
                        Suite::Kl,
                        format!("LogN({mu1}, {s1}) ‖ LogN({mu2}, {s2})"),
                        kl_rel(formula, quad),
                        KL_TOL_LOGNORMAL,
                    ));
                }
            }
        }
    }
    Ok(checks)
}

fn contextual_prior(mode: AttentionMode) -> PriorConfig {
    match mode {
        AttentionMode::Lognormal { .. } => PriorConfig {
            kind: PriorKind::Contextual,
            family: PriorFamily::Lognormal,
            sigma1: 0.8,
            d_mid: 3,
            ..PriorConfig::default()
        },
        _ => PriorConfig {
            kind: PriorKind::Contextual,
            family: PriorFamily::Gamma,
            beta: 0.5,
            d_mid: 3,
            ..PriorConfig::default()
        },
    }
}

/// `layers` layers of two heads with `d_k = d_v = 4`; 3 queries attend to 5 keys.
fn tiny_classifier(
    mode: AttentionMode,
    prior: PriorConfig,
    score_fn: ScoreFn,
    layers: usize,
) -> Result<(AttentionClassifier, SeqBatch)> {
    let layer = AttentionConfig {
        mode,
        heads: 2,
        score_fn,
        d_k: 4,
        d_v: 4,
        weight_dropout: 0.0,
    };
    let cfg = ClassifierConfig {
        d_query: 3,
        d_key: 4,
        classes: 3,
        layers: vec![layer; layers],
        prior,
    };
    let batch = SeqBatch::new(uniform(vec![3, 3], 1), uniform(vec![5, 4], 2), vec![0, 2, 1], 1, true)?;
    Ok((AttentionClassifier::new(cfg)?, batch))
}

/// Initial parameters with prior-network biases pushed off the ReLU kink.
fn tiny_params(model: &AttentionClassifier) -> Result<ParamStore> {
    let mut store = model.init_params(&mut rng(5))?;
    for i in 0..store.len() {
        if store.entries()[i].name.ends_with("f1_b") {
            let t = store.tensor_mut(i);
            let n = t.len();
            t.data_mut().copy_from_slice(&[0.3, -0.2, 0.25][..n]);
        }
    }
    Ok(store)
}

/// The full training objective (likelihood, weighted KL, L2) at fixed noise.
fn objective(
    model: &AttentionClassifier,
    batch: &SeqBatch,
    groups: &[ParamGroup],
    tape: &mut Tape,
    vars: &[Var],
) -> bam_core::Result<Var> {
    let out = model.forward(tape, vars, batch, ForwardMode::posterior(false), &mut rng(77))?;
    let l2: Vec<Var> = vars
        .iter()
        .zip(groups)
        .filter(|(_, g)| **g == ParamGroup::Weight)
        .map(|(v, _)| *v)
        .collect();
    let (total, _) = loss(tape, out.logits, out.rows, out.targets, &out.kl_layers, 0.7, 1e-3, &l2)?;
    Ok(total)
}

fn grad_suite() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let modes = [AttentionMode::Weibull { k: 2.0 }, AttentionMode::Lognormal { sigma: 0.6 }];
    for mode in modes {
        for score_fn in [ScoreFn::ScaledDotProduct, ScoreFn::AdditiveLeakyRelu { slope: 0.2 }] {
            let (model, batch) = tiny_classifier(mode, contextual_prior(mode), score_fn, 2)?;
            let store = tiny_params(&model)?;
            let groups: Vec<ParamGroup> = store.entries().iter().map(|e| e.group).collect();
            let inputs: Vec<Tensor> = store.entries().iter().map(|e| e.tensor.clone()).collect();
            let report = check_gradients(&inputs, GRAD_STEP, |t, v| objective(&model, &batch, &groups, t, v))?;
            for group in [ParamGroup::Weight, ParamGroup::Bias, ParamGroup::Prior] {
                let worst = report
                    .analytic
                    .iter()
                    .zip(&report.numeric)
                    .zip(&groups)
                    .filter(|(_, g)| **g == group)
                    .flat_map(|((a, n), _)| a.iter().zip(n).map(|(&x, &y)| rel_error(x, y)))
                    .fold(0.0, f64::max);
                let score = match score_fn {
                    ScoreFn::ScaledDotProduct => "dot-product",
                    ScoreFn::AdditiveLeakyRelu { .. } => "additive",
                };
                checks.push(Check::new(
                    Suite::Grad,
                    format!("{mode:?} {score} L=2 H=2, {} parameters", group.as_str()),
                    worst,
                    GRAD_TOL,
                ));
            }
        }
    }
    Ok(checks)
}

fn logits<M: Model>(model: &M, params: &ParamStore, batch: &M::Batch, fwd: ForwardMode) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = params.bind_constant(&mut tape);
    let out = model.forward(&mut tape, &vars, batch, fwd, &mut rng(11))?;
    Ok(tape.value(out.logits).data().to_vec())
}

fn classifier_logits(
    model: &AttentionClassifier,
    params: &ParamStore,
    batch: &SeqBatch,
    fwd: ForwardMode,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = params.bind_constant(&mut tape);
    let out = model.forward(&mut tape, &vars, batch, fwd, &mut rng(11))?;
    Ok(tape.value(out.logits).data().to_vec())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn exact_mismatch(a: &[f64], b: &[f64]) -> f64 {
    if a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()) {
        0.0
    } else {
        max_abs_diff(a, b).max(f64::MIN_POSITIVE)
    }
}

fn limit_suite() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let prior = PriorConfig::default();
    let stochastic = [
        AttentionMode::Weibull { k: 1.0 },
        AttentionMode::Lognormal { sigma: 0.7 },
    ];
    for score_fn in [ScoreFn::ScaledDotProduct, ScoreFn::AdditiveLeakyRelu { slope: 0.2 }] {
        let (det, batch) = tiny_classifier(AttentionMode::Deterministic, prior.clone(), score_fn, 2)?;
        let params = tiny_params(&det)?;
        let reference = classifier_logits(&det, &params, &batch, ForwardMode::EVAL)?;
        let (ln, _) = tiny_classifier(AttentionMode::Lognormal { sigma: LIMIT_SIGMA }, prior.clone(), score_fn, 2)?;
        let sampled = classifier_logits(&ln, &params, &batch, ForwardMode::posterior(false))?;
        checks.push(Check::new(
            Suite::Limit,
            format!("lognormal σ={LIMIT_SIGMA:e} vs deterministic, {score_fn:?}"),
            max_abs_diff(&sampled, &reference),
            LIMIT_TOL,
        ));
        for mode in stochastic {
            let (m, _) = tiny_classifier(mode, prior.clone(), score_fn, 2)?;
            let substituted = classifier_logits(&m, &params, &batch, ForwardMode::EVAL)?;
            checks.push(Check::new(
                Suite::Limit,
                format!("expectation-substituted {mode:?} bit-identical to deterministic, {score_fn:?}"),
                exact_mismatch(&substituted, &reference),
                0.0,
            ));
        }
    }

    let graph = synthetic_citation_graph(
        "limit",
        &CitationParams {
            nodes: 40,
            features: 12,
            classes: 3,
            edges: 80,
            train_per_class: 4,
            val: 8,
            test: 12,
            ..CitationParams::default()
        },
        &mut rng(3),
    )?;
    for dense in [false, true] {
        let gat = |mode| {
            GraphModel::new(
                &graph,
                GatConfig {
                    mode,
                    dense,
                    ..GatConfig::default()
                },
            )
        };
        let det = gat(AttentionMode::Deterministic)?;
        let params = det.init_params(&mut rng(4))?;
        let batch = det.all_nodes();
        let reference = logits(&det, &params, &batch, ForwardMode::EVAL)?;
        let layout = if dense { "dense" } else { "sparse" };
        let sampled = logits(
            &gat(AttentionMode::Lognormal { sigma: LIMIT_SIGMA })?,
            &params,
            &batch,
            ForwardMode::posterior(false),
        )?;
        checks.push(Check::new(
            Suite::Limit,
            format!("GAT {layout}: lognormal σ={LIMIT_SIGMA:e} vs deterministic"),
            max_abs_diff(&sampled, &reference),
            LIMIT_TOL,
        ));
        for mode in stochastic {
            let substituted = logits(&gat(mode)?, &params, &batch, ForwardMode::EVAL)?;
            checks.push(Check::new(
                Suite::Limit,
                format!("GAT {layout}: expectation-substituted {mode:?} bit-identical to deterministic"),
                exact_mismatch(&substituted, &reference),
                0.0,
            ));
        }
    }
    Ok(checks)
}

/// Per forward pass, the summed analytic layer KLs and the summed sampled
/// log ratios `log q(S) − log p(S)` over all layers and heads.
fn kl_estimates(
    model: &AttentionClassifier,
    params: &ParamStore,
    batch: &SeqBatch,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let vars = params.bind_constant(&mut tape);
    let out = model.forward(&mut tape, &vars, batch, ForwardMode::posterior(false), rng)?;
    let (mut analytic, mut sampled) = (0.0, 0.0);
    for (heads, psis) in out.heads.iter().zip(&out.psi) {
        for (head, psi) in heads.iter().zip(psis) {
            let pp = prior_params(&mut tape, *psi, &model.cfg.prior, &head.sample.pattern)?;
            let kl = layer_kl(&mut tape, &head.sample, &pp)?;
            analytic += tape.value(kl).item()?;
            sampled += sampled_log_ratio(&tape, &head.sample, &pp)?;
        }
    }
    Ok((analytic, sampled))
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (mean, xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0))
}

/// The analytic KL against a Monte Carlo average of sampled log ratios on a
/// one-layer model (reported in standard errors), and the variance of the
/// layer-wise analytic estimator against the fully sampled one on a
/// two-layer model (reported as their ratio).
pub fn rao_blackwell_suite(draws: usize, variance_draws: usize) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let modes = [AttentionMode::Weibull { k: 2.0 }, AttentionMode::Lognormal { sigma: 0.8 }];
    for mode in modes {
        let (model, batch) = tiny_classifier(mode, contextual_prior(mode), ScoreFn::ScaledDotProduct, 1)?;
        let params = tiny_params(&model)?;
        let mut r = rng(17);
        let mut analytic = None;
        let mut sampled = Vec::with_capacity(draws);
        for _ in 0..draws {
            let (a, s) = kl_estimates(&model, &params, &batch, &mut r)?;
            analytic.get_or_insert(a);
            sampled.push(s);
        }
        let (mean, var) = mean_var(&sampled);
        let se = (var / draws as f64).sqrt();
        let analytic = analytic.expect("at least one draw");
        checks.push(Check::new(
            Suite::RaoBlackwell,
            format!("{mode:?} one layer: analytic {analytic:.5} vs sampled {mean:.5} ± {se:.5}, in standard errors"),
            (mean - analytic).abs() / se,
            MC_STANDARD_ERRORS,
        ));

        let (model, batch) = tiny_classifier(mode, contextual_prior(mode), ScoreFn::ScaledDotProduct, 2)?;
        let params = tiny_params(&model)?;
        let mut r = rng(23);
        let mut semi = Vec::with_capacity(variance_draws);
        let mut full = Vec::with_capacity(variance_draws);
        for _ in 0..variance_draws {
            let (a, s) = kl_estimates(&model, &params, &batch, &mut r)?;
            semi.push(a);
            full.push(s);
        }
        let (vs, vf) = (mean_var(&semi).1, mean_var(&full).1);
        checks.push(Check::new(
            Suite::RaoBlackwell,
            format!("{mode:?} two layers: layer-wise analytic variance {vs:.3e} over fully sampled {vf:.3e}"),
            vs / vf,
            1.0,
        ));
        checks.push(Check::new(
            Suite::RaoBlackwell,
            format!("{mode:?} two layers: layer-wise analytic estimate varies with first-layer noise"),
            f64::from(u8::from(vs <= 0.0)),
            0.0,
        ));
    }
    Ok(checks)
}

/// Randomized stochastic attention passes over random masks: the largest
/// row-sum deviation from one, and the largest weight on a masked entry.
pub fn simplex_suite(passes: usize) -> Result<Vec<Check>> {
    let mut r = rng(29);
    let (mut row_err, mut masked_max, mut masked_nonzero) = (0.0f64, 0.0f64, 0usize);
    for pass in 0..passes {
        let m = r.random_range(1..8);
        let n = r.random_range(1..10);
        let mut allowed: Vec<bool> = (0..m * n).map(|_| r.random_bool(0.6)).collect();
        for i in 0..m {
            if !allowed[i * n..(i + 1) * n].iter().any(|&a| a) {
                allowed[i * n + r.random_range(0..n)] = true;
            }
        }
        let mode = match pass % 4 {
            0 => AttentionMode::Weibull { k: r.random_range(0.3..60.0) },
            1 => AttentionMode::Weibull { k: 1.0 },
            2 => AttentionMode::Lognormal { sigma: r.random_range(0.05..2.5) },
            _ => AttentionMode::Lognormal { sigma: 1e-8 },
        };
        let scale = r.random_range(0.1..30.0);
        let support = Support::dense(m, n, Some(Mask::new(m, n, allowed.clone())?))?;
        let phi = Tensor::uniform(vec![m, n], -scale, scale, &mut r)?;
        let v = Tensor::uniform(vec![n, 2], -1.0, 1.0, &mut r)?;
        let eps = mode.draw_noise(&mut r, support.nnz()).expect("stochastic mode");
        let mut tape = Tape::new();
        let p = tape.constant(phi);
        let vv = tape.constant(v);
        let (sample, _) = stochastic_attention(&mut tape, p, vv, mode, &support, Some(&eps), true, None)?;
        let w = sample.densify(tape.value(sample.w).data())?;
        for i in 0..m {
            row_err = row_err.max((w.row(i).iter().sum::<f64>() - 1.0).abs());
            for j in 0..n {
                if !allowed[i * n + j] {
                    let x = w.at(i, j);
                    masked_max = masked_max.max(x.abs());
                    masked_nonzero += usize::from(x.to_bits() != 0);
                }
            }
        }
    }
    Ok(vec![
        Check::new(Suite::Simplex, format!("{passes} passes: row sums of W equal one"), row_err, SIMPLEX_TOL),
        Check::new(
            Suite::Simplex,
            format!("{passes} passes: masked entries are exactly +0 ({masked_nonzero} violations)"),
            masked_max.max(masked_nonzero as f64),
            0.0,
        ),
    ])
}

/// Runs the suites in order and prints every check.
pub fn run_suites(suites: &[Suite], out: &mut dyn std::io::Write) -> Result<Vec<Check>> {
    let mut all = Vec::new();
    for suite in suites {
        for check in suite.run()? {
            let _ = writeln!(out, "{check}");
            all.push(check);
        }
    }
    let failed = all.iter().filter(|c| !c.passed()).count();
    let _ = writeln!(out, "{} checks, {} passed, {failed} failed", all.len(), all.len() - failed);
    Ok(all)
}
