mod common;

use std::sync::Arc;

use bam_core::attention::{
    attention_weights, deterministic_attention, draw_layer_noise, draw_stack_noise, multi_head_layer, score,
    stack_layers, stochastic_attention, AdditiveParams, AttentionConfig, AttentionMode, ForwardMode, HeadParams,
    LayerSpec, ScoreFn, Support,
};
use bam_core::autodiff::{Mask, Pattern, Tape, Tensor, Var};
use bam_core::BamError;
use common::{assert_grad, max_abs_diff, random, rng, weighted_sum};
use proptest::prelude::*;

const WEIBULL: AttentionMode = AttentionMode::Weibull { k: 2.0 };
const LOGNORMAL: AttentionMode = AttentionMode::Lognormal { sigma: 0.5 };

fn cfg(mode: AttentionMode, heads: usize, d_k: usize, d_v: usize) -> AttentionConfig {
    AttentionConfig {
        mode,
        heads,
        score_fn: ScoreFn::ScaledDotProduct,
        d_k,
        d_v,
        weight_dropout: 0.0,
    }
}

fn mask_from(rows: &[&[bool]]) -> Mask {
    let n = rows[0].len();
    Mask::new(rows.len(), n, rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[test]
fn scaled_dot_product_of_identities() {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::identity(2).unwrap());
    let k = tape.constant(Tensor::identity(2).unwrap());
    let support = Support::dense(2, 2, None).unwrap();
    let phi = score(&mut tape, q, k, ScoreFn::ScaledDotProduct, None, &support).unwrap();
    let r = 1.0 / 2f64.sqrt();
    assert_eq!(tape.value(phi).data(), &[r, 0.0, 0.0, r]);
}

#[test]
fn additive_score_with_zero_vector_is_zero() {
    let mut tape = Tape::new();
    let q = tape.constant(random(vec![3, 4], 1));
    let k = tape.constant(random(vec![5, 4], 2));
    let a = AdditiveParams {
        a_q: tape.constant(Tensor::zeros(vec![4, 1]).unwrap()),
        a_k: tape.constant(Tensor::zeros(vec![4, 1]).unwrap()),
    };
    let support = Support::dense(3, 5, None).unwrap();
    let phi = score(&mut tape, q, k, ScoreFn::AdditiveLeakyRelu { slope: 0.2 }, Some(a), &support).unwrap();
    assert!(tape.value(phi).data().iter().all(|&x| x == 0.0));
}

#[test]
fn score_dimension_mismatch() {
    let mut tape = Tape::new();
    let q = tape.constant(random(vec![3, 4], 1));
    let k = tape.constant(random(vec![5, 3], 2));
    let support = Support::dense(3, 5, None).unwrap();
    let err = score(&mut tape, q, k, ScoreFn::ScaledDotProduct, None, &support).unwrap_err();
    assert!(matches!(err, BamError::Dimension(_)));
    let additive = score(&mut tape, q, q, ScoreFn::AdditiveLeakyRelu { slope: 0.2 }, None, &support);
    assert!(additive.is_err());
}

#[test]
fn score_gradients_match_finite_differences() {
    let dense = Support::dense(3, 4, None).unwrap();
    let sparse = Support::sparse(Arc::new(
        Pattern::from_entries(3, 4, [(0, 0), (0, 2), (1, 1), (1, 3), (2, 0), (2, 1), (2, 3)]).unwrap(),
    ))
    .unwrap();
    for support in [dense, sparse] {
        let s = support.clone();
        assert_grad(&[random(vec![3, 5], 1), random(vec![4, 5], 2)], move |t, v| {
            let phi = score(t, v[0], v[1], ScoreFn::ScaledDotProduct, None, &s)?;
            weighted_sum(t, phi, 3)
        });
        let s = support.clone();
        assert_grad(
            &[random(vec![3, 5], 4), random(vec![4, 5], 5), random(vec![5, 1], 6), random(vec![5, 1], 7)],
            move |t, v| {
                let a = AdditiveParams { a_q: v[2], a_k: v[3] };
                let phi = score(t, v[0], v[1], ScoreFn::AdditiveLeakyRelu { slope: 0.2 }, Some(a), &s)?;
                weighted_sum(t, phi, 8)
            },
        );
    }
}

#[test]
fn zero_scores_average_the_values() {
    let mut tape = Tape::new();
    let phi = tape.constant(Tensor::zeros(vec![2, 3]).unwrap());
    let v = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 5.0], vec![8.0, 2.0]]).unwrap());
    let (_, o) = deterministic_attention(&mut tape, phi, v, None).unwrap();
    let o = tape.value(o).data();
    for row in o.chunks(2) {
        assert!((row[0] - 4.0).abs() < 1e-14);
        assert!((row[1] - 3.0).abs() < 1e-14);
    }
}

#[test]
fn single_allowed_column_is_one_hot() {
    let mut tape = Tape::new();
    let phi = tape.constant(random(vec![2, 3], 1));
    let v = tape.constant(random(vec![3, 2], 2));
    let mask = Arc::new(mask_from(&[&[false, true, false], &[false, true, false]]));
    let (w, o) = deterministic_attention(&mut tape, phi, v, Some(mask)).unwrap();
    assert_eq!(tape.value(w).data(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    let v1 = tape.value(v).row(1).to_vec();
    assert_eq!(tape.value(o).row(0), v1.as_slice());
    assert_eq!(tape.value(o).row(1), v1.as_slice());
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut tape = Tape::new();
    let phi = tape.constant(Tensor::uniform(vec![4, 6], -5.0, 5.0, &mut rng(3)).unwrap());
    let v = tape.constant(random(vec![6, 2], 4));
    let (w, _) = deterministic_attention(&mut tape, phi, v, None).unwrap();
    for row in tape.value(w).data().chunks(6) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn fully_masked_row_is_degenerate() {
    let mask = mask_from(&[&[true, false], &[false, false]]);
    assert!(Support::dense(2, 2, Some(mask.clone())).is_err());
    let mut tape = Tape::new();
    let phi = tape.constant(random(vec![2, 2], 1));
    let v = tape.constant(random(vec![2, 2], 2));
    assert!(deterministic_attention(&mut tape, phi, v, Some(Arc::new(mask))).is_err());
}

#[test]
fn invalid_mode_is_rejected() {
    for mode in [AttentionMode::Weibull { k: 0.0 }, AttentionMode::Lognormal { sigma: -1.0 }] {
        let mut tape = Tape::new();
        let phi = tape.constant(random(vec![2, 2], 1));
        let v = tape.constant(random(vec![2, 2], 2));
        let support = Support::dense(2, 2, None).unwrap();
        let eps = vec![0.5; 4];
        assert!(stochastic_attention(&mut tape, phi, v, mode, &support, Some(&eps), true, None).is_err());
    }
}

fn stochastic_output(
    mode: AttentionMode,
    phi: &Tensor,
    v: &Tensor,
    support: &Support,
    eps: Option<&[f64]>,
    training: bool,
) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let phi = tape.constant(phi.clone());
    let v = tape.constant(v.clone());
    let (sample, o) = stochastic_attention(&mut tape, phi, v, mode, support, eps, training, None).unwrap();
    (tape.value(sample.w).data().to_vec(), tape.value(o).data().to_vec())
}

#[test]
fn expectation_substitution_is_bit_identical_to_soft_attention() {
    let phi = random(vec![3, 4], 1);
    let v = random(vec![4, 2], 2);
    let mask = mask_from(&[&[true, false, true, true], &[true, true, true, true], &[false, false, true, false]]);
    for mask in [None, Some(mask)] {
        let support = Support::dense(3, 4, mask.clone()).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant(phi.clone());
        let vv = tape.constant(v.clone());
        let (_, o) = deterministic_attention(&mut tape, p, vv, mask.map(Arc::new)).unwrap();
        let expected = tape.value(o).data().to_vec();
        for mode in [AttentionMode::Deterministic, WEIBULL, LOGNORMAL] {
            let (_, o) = stochastic_output(mode, &phi, &v, &support, None, false);
            assert_eq!(o, expected, "{mode:?}");
        }
    }
}

#[test]
fn tiny_lognormal_scale_recovers_soft_attention() {
    let phi = random(vec![3, 5], 1);
    let v = random(vec![5, 2], 2);
    let support = Support::dense(3, 5, None).unwrap();
    let (_, expected) = stochastic_output(AttentionMode::Deterministic, &phi, &v, &support, None, true);
    let eps = AttentionMode::Lognormal { sigma: 1.0 }.draw_noise(&mut rng(9), 15).unwrap();
    let mode = AttentionMode::Lognormal { sigma: 1e-8 };
    let (_, o) = stochastic_output(mode, &phi, &v, &support, Some(&eps), true);
    assert!(max_abs_diff(&o, &expected) < 1e-6);
}

#[test]
fn sharp_weibull_mean_is_close_to_softmax() {
    let phi = random(vec![3, 4], 5);
    let pattern = Arc::new(Pattern::full(3, 4));
    let mode = AttentionMode::Weibull { k: 1000.0 };
    let mut r = rng(11);
    let draws = 10_000;
    let mut mean = vec![0.0; 12];
    for _ in 0..draws {
        let eps = mode.draw_noise(&mut r, 12).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant(phi.clone());
        let sample = attention_weights(&mut tape, p, &pattern, mode, Some(&eps)).unwrap();
        for (m, w) in mean.iter_mut().zip(tape.value(sample.w).data()) {
            *m += w / draws as f64;
        }
    }
    let expected: Vec<f64> = phi.data().chunks(4).flat_map(softmax).collect();
    assert!(max_abs_diff(&mean, &expected) < 0.002);
}

#[test]
fn dense_and_sparse_supports_agree_on_the_same_noise() {
    let mask = mask_from(&[&[true, false, true, true], &[false, true, true, false], &[true, true, true, true]]);
    let pattern = Arc::new(Pattern::from_mask(&mask));
    let dense = Support::dense(3, 4, Some(mask)).unwrap();
    let sparse = Support::sparse(pattern.clone()).unwrap();
    let q = random(vec![3, 4], 1);
    let k = random(vec![4, 4], 2);
    let v = random(vec![4, 3], 3);
    for mode in [WEIBULL, LOGNORMAL] {
        let eps = mode.draw_noise(&mut rng(4), pattern.nnz()).unwrap();
        let run = |support: &Support| {
            let mut tape = Tape::new();
            let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
            let phi = score(&mut tape, qv, kv, ScoreFn::ScaledDotProduct, None, support).unwrap();
            let (sample, o) = stochastic_attention(&mut tape, phi, vv, mode, support, Some(&eps), true, None).unwrap();
            (tape.value(sample.w).data().to_vec(), tape.value(o).data().to_vec())
        };
        let (wd, od) = run(&dense);
        let (ws, os) = run(&sparse);
        assert!(max_abs_diff(&wd, &ws) < 1e-14);
        assert!(max_abs_diff(&od, &os) < 1e-14);
    }
}

#[test]
fn identical_seeds_give_identical_weights() {
    let phi = random(vec![4, 5], 1);
    let v = random(vec![5, 2], 2);
    let support = Support::dense(4, 5, None).unwrap();
    for mode in [WEIBULL, LOGNORMAL] {
        let draw = |seed| {
            let eps = mode.draw_noise(&mut rng(seed), 20).unwrap();
            stochastic_output(mode, &phi, &v, &support, Some(&eps), true).0
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
    }
}

/// Runs one `multi_head_layer` with the given head parameter tensors.
fn run_layer(
    tape: &mut Tape,
    x: Var,
    params: &[Var],
    cfg: &AttentionConfig,
    support: &Support,
    eps: &[Option<Vec<f64>>],
    fwd: ForwardMode,
) -> bam_core::Result<(Var, Vec<bam_core::attention::HeadOutput>)> {
    let heads: Vec<HeadParams> = params
        .chunks(3)
        .map(|p| HeadParams {
            m_q: p[0],
            m_k: p[1],
            m_v: p[2],
            additive: None,
        })
        .collect();
    multi_head_layer(tape, x, x, &heads, cfg, support, eps, fwd, &mut rng(0))
}

#[test]
fn single_head_layer_is_plain_attention() {
    let x = random(vec![4, 3], 1);
    let (mq, mk, mv) = (random(vec![3, 2], 2), random(vec![3, 2], 3), random(vec![3, 5], 4));
    let support = Support::dense(4, 4, None).unwrap();
    let c = cfg(WEIBULL, 1, 2, 5);
    let eps = vec![WEIBULL.draw_noise(&mut rng(5), 16)];
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let p = [tape.constant(mq), tape.constant(mk), tape.constant(mv)];
    let (out, _) = run_layer(&mut tape, xv, &p, &c, &support, &eps, ForwardMode::posterior(false)).unwrap();

    let q = tape.matmul(xv, p[0]).unwrap();
    let k = tape.matmul(xv, p[1]).unwrap();
    let v = tape.matmul(xv, p[2]).unwrap();
    let phi = score(&mut tape, q, k, ScoreFn::ScaledDotProduct, None, &support).unwrap();
    let (_, o) = stochastic_attention(&mut tape, phi, v, WEIBULL, &support, eps[0].as_deref(), true, None).unwrap();
    assert_eq!(tape.value(out).data(), tape.value(o).data());
}

#[test]
fn identical_heads_give_identical_halves() {
    let x = random(vec![4, 3], 1);
    let (mq, mk, mv) = (random(vec![3, 2], 2), random(vec![3, 2], 3), random(vec![3, 2], 4));
    let support = Support::dense(4, 4, None).unwrap();
    let c = cfg(LOGNORMAL, 2, 2, 2);
    let noise = LOGNORMAL.draw_noise(&mut rng(5), 16);
    let eps = vec![noise.clone(), noise];
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let p: Vec<Var> = [&mq, &mk, &mv, &mq, &mk, &mv].iter().map(|t| tape.constant((*t).clone())).collect();
    let (out, _) = run_layer(&mut tape, xv, &p, &c, &support, &eps, ForwardMode::posterior(false)).unwrap();
    let out = tape.value(out);
    for i in 0..4 {
        assert_eq!(out.row(i)[..2], out.row(i)[2..]);
    }
}

#[test]
fn two_head_stochastic_layer_gradients() {
    let support = Support::dense(4, 4, None).unwrap();
    for mode in [WEIBULL, LOGNORMAL] {
        let c = cfg(mode, 2, 2, 3);
        let eps = draw_layer_noise(mode, 2, 16, &mut rng(6));
        let x = random(vec![4, 3], 1);
        let inputs: Vec<Tensor> = (0..6)
            .map(|i| random(vec![3, if i % 3 == 2 { 3 } else { 2 }], 10 + i))
            .collect();
        let s = support.clone();
        assert_grad(&inputs, move |t, v| {
            let xv = t.constant(x.clone());
            let (out, _) = run_layer(t, xv, v, &c, &s, &eps, ForwardMode::posterior(false))?;
            weighted_sum(t, out, 20)
        });
    }
}

#[test]
fn layer_rejects_inconsistent_projections() {
    let support = Support::dense(4, 4, None).unwrap();
    let c = cfg(AttentionMode::Deterministic, 1, 2, 3);
    let mut tape = Tape::new();
    let x = tape.constant(random(vec![4, 3], 1));
    let p = [
        tape.constant(random(vec![3, 2], 2)),
        tape.constant(random(vec![3, 2], 3)),
        tape.constant(random(vec![3, 2], 4)),
    ];
    let err = run_layer(&mut tape, x, &p, &c, &support, &[None], ForwardMode::EVAL).unwrap_err();
    assert!(matches!(err, BamError::Dimension(_)));
}

fn stack_specs(mode: AttentionMode, widths: &[usize]) -> (Vec<LayerSpec>, Vec<Tensor>) {
    let support = Support::dense(5, 5, None).unwrap();
    let mut specs = Vec::new();
    let mut tensors = Vec::new();
    let mut d_in = widths[0];
    for (l, &w) in widths[1..].iter().enumerate() {
        let c = cfg(mode, 2, w, w);
        for h in 0..6 {
            tensors.push(random(vec![d_in, w], 100 * l as u64 + h));
        }
        specs.push((c, support.clone()));
        d_in = 2 * w;
    }
    let layers = specs
        .into_iter()
        .map(|(cfg, support)| LayerSpec {
            cfg,
            heads: Vec::new(),
            support,
        })
        .collect();
    (layers, tensors)
}

fn bind_stack(tape: &mut Tape, layers: &mut [LayerSpec], tensors: &[Tensor]) {
    for (l, layer) in layers.iter_mut().enumerate() {
        layer.heads = tensors[6 * l..6 * l + 6]
            .chunks(3)
            .map(|p| HeadParams {
                m_q: tape.constant(p[0].clone()),
                m_k: tape.constant(p[1].clone()),
                m_v: tape.constant(p[2].clone()),
                additive: None,
            })
            .collect();
    }
}

#[test]
fn one_layer_stack_is_the_layer() {
    let (mut layers, tensors) = stack_specs(WEIBULL, &[3, 2]);
    let mut tape = Tape::new();
    bind_stack(&mut tape, &mut layers, &tensors);
    let x = tape.constant(random(vec![5, 3], 1));
    let eps = draw_stack_noise(&layers, ForwardMode::posterior(false), &mut rng(2));
    let (out, _) = stack_layers(&mut tape, x, None, &layers, &eps, ForwardMode::posterior(false), &mut rng(0)).unwrap();
    let l = &layers[0];
    let (direct, _) =
        multi_head_layer(&mut tape, x, x, &l.heads, &l.cfg, &l.support, &eps[0], ForwardMode::posterior(false), &mut rng(0))
            .unwrap();
    assert_eq!(tape.value(out).data(), tape.value(direct).data());
}

#[test]
fn evaluation_stack_equals_deterministic_stack() {
    let x = random(vec![5, 3], 1);
    let run = |mode| {
        let (mut layers, tensors) = stack_specs(mode, &[3, 2, 2]);
        let mut tape = Tape::new();
        bind_stack(&mut tape, &mut layers, &tensors);
        let xv = tape.constant(x.clone());
        let eps = draw_stack_noise(&layers, ForwardMode::EVAL, &mut rng(2));
        let (out, _) = stack_layers(&mut tape, xv, None, &layers, &eps, ForwardMode::EVAL, &mut rng(0)).unwrap();
        tape.value(out).data().to_vec()
    };
    let expected = run(AttentionMode::Deterministic);
    assert_eq!(run(WEIBULL), expected);
    assert_eq!(run(LOGNORMAL), expected);
}

#[test]
fn first_layer_noise_reaches_second_layer_scores() {
    let (mut layers, tensors) = stack_specs(WEIBULL, &[3, 2, 2]);
    let mut tape = Tape::new();
    bind_stack(&mut tape, &mut layers, &tensors);
    let x = tape.constant(random(vec![5, 3], 1));
    let fwd = ForwardMode::posterior(false);
    let eps = draw_stack_noise(&layers, fwd, &mut rng(2));
    let mut changed = eps.clone();
    changed[0] = draw_stack_noise(&layers, fwd, &mut rng(3))[0].clone();
    let phi2 = |tape: &mut Tape, eps: &[Vec<Option<Vec<f64>>>]| {
        let (_, heads) = stack_layers(tape, x, None, &layers, eps, fwd, &mut rng(0)).unwrap();
        tape.value(heads[1][0].sample.phi).data().to_vec()
    };
    let a = phi2(&mut tape, &eps);
    let b = phi2(&mut tape, &changed);
    assert_ne!(a, b);
}

fn mask_strategy() -> impl Strategy<Value = (usize, usize, Vec<bool>)> {
    (1usize..5, 1usize..6).prop_flat_map(|(m, n)| {
        (Just(m), Just(n), proptest::collection::vec(any::<bool>(), m * n)).prop_map(|(m, n, mut allowed)| {
            for i in 0..m {
                if !allowed[i * n..(i + 1) * n].iter().any(|&a| a) {
                    allowed[i * n + i % n] = true;
                }
            }
            (m, n, allowed)
        })
    })
}

proptest! {
    #[test]
    fn sampled_weights_lie_on_the_simplex(
        (m, n, allowed) in mask_strategy(),
        scale in 0.1f64..20.0,
        mode_index in 0usize..3,
        seed in any::<u64>(),
    ) {
        let mode = [AttentionMode::Weibull { k: 0.5 }, AttentionMode::Weibull { k: 50.0 }, AttentionMode::Lognormal { sigma: 2.0 }][mode_index];
        let mask = Mask::new(m, n, allowed.clone()).unwrap();
        let support = Support::dense(m, n, Some(mask)).unwrap();
        let phi = Tensor::uniform(vec![m, n], -scale, scale, &mut rng(seed)).unwrap();
        let v = random(vec![n, 2], seed ^ 1);
        let eps = mode.draw_noise(&mut rng(seed ^ 2), support.nnz()).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant(phi);
        let vv = tape.constant(v);
        let (sample, _) = stochastic_attention(&mut tape, p, vv, mode, &support, Some(&eps), true, None).unwrap();
        let w = sample.densify(tape.value(sample.w).data()).unwrap();
        let s = sample.densify(tape.value(sample.s).data()).unwrap();
        for i in 0..m {
            let row_s: f64 = s.row(i).iter().sum();
            prop_assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for j in 0..n {
                let (wij, sij) = (w.at(i, j), s.at(i, j));
                if allowed[i * n + j] {
                    prop_assert!(sij > 0.0 && wij >= 0.0);
                    prop_assert!((wij - sij / row_s).abs() < 1e-12);
                } else {
                    prop_assert_eq!(wij, 0.0);
                }
            }
        }
    }
}
