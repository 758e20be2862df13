mod common;

use std::sync::Arc;

use bam_core::attention::{AttentionConfig, AttentionMode, ScoreFn};
use bam_core::models::{generate_synthetic, AttentionClassifier, ClassifierConfig, SyntheticModel, SyntheticParams};
use bam_core::objective::{Model, Split};
use bam_core::prior::PriorConfig;
use bam_core::uncertainty::{certainty, pavpu, posterior_sample, welch_t_test, PavpuCounts, PosteriorPredictions};
use bam_core::BamError;
use common::rng;
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

#[test]
fn pavpu_examples() {
    assert_eq!(pavpu(&[true; 4], &[true; 4]).unwrap().0, 1.0);
    assert_eq!(pavpu(&[true; 3], &[false; 3]).unwrap().0, 0.0);
    let (score, counts) = pavpu(&[true, true, false, true], &[true, true, false, false]).unwrap();
    assert_eq!(score, 0.75);
    assert_eq!(
        counts,
        PavpuCounts {
            n_ac: 2.0,
            n_au: 1.0,
            n_ic: 0.0,
            n_iu: 1.0
        }
    );
}

#[test]
fn pavpu_errors() {
    assert!(matches!(pavpu(&[], &[]), Err(BamError::UndefinedMetric(_))));
    assert!(matches!(pavpu(&[true], &[true, false]), Err(BamError::Dimension(_))));
    assert!(PavpuCounts::default().pavpu().is_err());
}

proptest! {
    #[test]
    fn pavpu_symmetries(flags in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..60), rotate in 0usize..60) {
        let (acc, cert): (Vec<bool>, Vec<bool>) = flags.iter().copied().unzip();
        let (base, counts) = pavpu(&acc, &cert).unwrap();
        prop_assert!((0.0..=1.0).contains(&base));
        prop_assert_eq!(counts.total(), flags.len() as f64);

        let mut rotated = flags.clone();
        rotated.rotate_left(rotate % flags.len());
        let (ra, rc): (Vec<bool>, Vec<bool>) = rotated.into_iter().unzip();
        prop_assert_eq!(pavpu(&ra, &rc).unwrap().0, base);

        let fa: Vec<bool> = acc.iter().map(|a| !a).collect();
        let fc: Vec<bool> = cert.iter().map(|c| !c).collect();
        prop_assert_eq!(pavpu(&fa, &fc).unwrap().0, base);
    }
}

/// Welch statistic and degrees of freedom written out from their definitions.
fn welch_by_hand(a: &[f64], b: &[f64]) -> (f64, f64) {
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let s2 = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        (n, m, s2)
    };
    let (n1, m1, s1) = stats(a);
    let (n2, m2, s2) = stats(b);
    let t = (m1 - m2) / (s1 / n1 + s2 / n2).sqrt();
    let df = (s1 / n1 + s2 / n2).powi(2) / ((s1 / n1).powi(2) / (n1 - 1.0) + (s2 / n2).powi(2) / (n2 - 1.0));
    (t, df)
}

#[test]
fn welch_matches_hand_computation() {
    let a = [0.61, 0.58, 0.66, 0.72, 0.55, 0.63, 0.69, 0.60];
    let b = [0.31, 0.42, 0.29, 0.36, 0.45, 0.33, 0.38, 0.27, 0.40, 0.35, 0.30];
    let w = welch_t_test(&a, &b).unwrap();
    let (t, df) = welch_by_hand(&a, &b);
    assert!((w.t - t).abs() < 1e-10 * t.abs());
    assert!((w.df - df).abs() < 1e-10 * df);
    let p = 2.0 * StudentsT::new(0.0, 1.0, df).unwrap().cdf(-t.abs());
    assert!((w.p_value - p).abs() < 1e-10, "{} vs {p}", w.p_value);
}

proptest! {
    #[test]
    fn welch_p_value_matches_student_t(
        a in proptest::collection::vec(0.0f64..1.0, 2..30),
        b in proptest::collection::vec(0.0f64..1.0, 2..30),
    ) {
        let w = welch_t_test(&a, &b).unwrap();
        let (t, df) = welch_by_hand(&a, &b);
        prop_assume!(df.is_finite() && t.is_finite());
        prop_assert!((w.t - t).abs() <= 1e-9 * t.abs().max(1.0));
        let p = 2.0 * StudentsT::new(0.0, 1.0, df).unwrap().cdf(-t.abs());
        prop_assert!((w.p_value - p).abs() < 1e-8, "p {} vs {}", w.p_value, p);
    }
}

#[test]
fn zero_variance_rules() {
    assert_eq!(welch_t_test(&[0.4; 5], &[0.4; 5]).unwrap().p_value, 1.0);
    assert_eq!(welch_t_test(&[0.7; 5], &[0.2; 5]).unwrap().p_value, 0.0);
    assert!(welch_t_test(&[0.1], &[0.2, 0.3]).is_err());
}

#[test]
fn tiny_variances_keep_finite_degrees_of_freedom() {
    let w = welch_t_test(&[0.0, 1e-150, -1e-150], &[0.2e-150, 0.3e-150, 0.0]).unwrap();
    let scaled = welch_t_test(&[0.0, 1.0, -1.0], &[0.2, 0.3, 0.0]).unwrap();
    assert!((w.df - scaled.df).abs() < 1e-12 * scaled.df, "{} vs {}", w.df, scaled.df);
    assert!((w.t - scaled.t).abs() < 1e-12 * scaled.t.abs());
    assert!((w.p_value - scaled.p_value).abs() < 1e-12);
}

fn predictions(m: usize, rows: &[Vec<f64>]) -> PosteriorPredictions {
    let classes = rows[0].len();
    let instances = rows.len() / m;
    PosteriorPredictions::new(m, instances, classes, rows.concat()).unwrap()
}

#[test]
fn identical_samples_with_distinct_means_are_certain() {
    let preds = predictions(3, &vec![vec![0.6, 0.3, 0.1]; 3]);
    assert_eq!(certainty(&preds, 0.05).unwrap(), vec![true]);
}

#[test]
fn exchangeable_top_classes_are_uncertain() {
    let rows = vec![vec![0.45, 0.45, 0.1], vec![0.5, 0.4, 0.1], vec![0.4, 0.5, 0.1], vec![0.45, 0.45, 0.1]];
    let preds = predictions(4, &rows);
    assert_eq!(certainty(&preds, 0.05).unwrap(), vec![false]);
    let w = welch_t_test(&preds.class_samples(0, 0), &preds.class_samples(0, 1)).unwrap();
    assert!(w.p_value > 0.99);
}

#[test]
fn certainty_ignores_class_order() {
    let mut r = rng(3);
    let rows: Vec<Vec<f64>> = (0..20 * 5)
        .map(|_| {
            let raw: Vec<f64> = (0..4).map(|c| rand::Rng::random::<f64>(&mut r) + 0.3 * c as f64).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / s).collect()
        })
        .collect();
    let perm = [2, 0, 3, 1];
    let permuted: Vec<Vec<f64>> = rows.iter().map(|row| perm.iter().map(|&c| row[c]).collect()).collect();
    let a = certainty(&predictions(20, &rows), 0.05).unwrap();
    let b = certainty(&predictions(20, &permuted), 0.05).unwrap();
    assert_eq!(a, b);
}

#[test]
fn predictions_validate_their_shape() {
    assert!(PosteriorPredictions::new(1, 1, 2, vec![0.5, 0.5]).is_err());
    assert!(PosteriorPredictions::new(2, 1, 2, vec![0.5, 0.5]).is_err());
    let preds = predictions(2, &[vec![0.2, 0.8], vec![0.4, 0.6]]);
    assert_eq!(preds.mean_probs(0), vec![0.30000000000000004, 0.7]);
    assert_eq!(preds.predictions(), vec![1]);
    assert!(certainty(&preds, 0.0).is_err());
    assert!(certainty(&preds, 1.0).is_err());
}

fn toy_model(mode: AttentionMode) -> SyntheticModel {
    let params = SyntheticParams {
        train: 10,
        val: 10,
        test: 30,
        ..SyntheticParams::default()
    };
    let task = Arc::new(generate_synthetic(&params, &mut rng(1)).unwrap());
    let cfg = ClassifierConfig {
        d_query: params.d,
        d_key: params.d,
        classes: params.classes,
        layers: vec![AttentionConfig {
            mode,
            heads: 2,
            score_fn: ScoreFn::ScaledDotProduct,
            d_k: 8,
            d_v: 8,
            weight_dropout: 0.3,
        }],
        prior: PriorConfig::default(),
    };
    SyntheticModel::new(AttentionClassifier::new(cfg).unwrap(), task, 10, false).unwrap()
}

fn sample(mode: AttentionMode, m: usize, dropout: bool, seed: u64) -> PosteriorPredictions {
    let model = toy_model(mode);
    let params = model.init_params(&mut rng(2)).unwrap();
    let batch = model.split_batch(Split::Test).unwrap();
    posterior_sample(&model, &params, &batch, m, dropout, &mut rng(seed)).unwrap()
}

#[test]
fn deterministic_samples_without_dropout_coincide() {
    let preds = sample(AttentionMode::Deterministic, 5, false, 1);
    for s in 1..5 {
        for i in 0..preds.instances() {
            assert_eq!(preds.row(s, i), preds.row(0, i));
        }
    }
    assert!(certainty(&preds, 0.05).unwrap().iter().all(|&c| c));
    let with_dropout = sample(AttentionMode::Deterministic, 5, true, 1);
    assert_ne!(with_dropout.row(0, 0), with_dropout.row(1, 0));
}

#[test]
fn stochastic_samples_vary_and_are_normalized() {
    let preds = sample(AttentionMode::Lognormal { sigma: 0.5 }, 20, false, 3);
    assert_eq!((preds.samples(), preds.instances(), preds.classes()), (20, 30, 4));
    for s in 0..20 {
        for i in 0..30 {
            assert!((preds.row(s, i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    let top = preds.predictions()[0];
    let xs = preds.class_samples(0, top);
    let mean = xs.iter().sum::<f64>() / 20.0;
    assert!(xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() > 0.0);
    assert_eq!(sample(AttentionMode::Lognormal { sigma: 0.5 }, 20, false, 3), preds);
    assert_eq!(sample(AttentionMode::Lognormal { sigma: 0.5 }, 2, false, 3).samples(), 2);
}

#[test]
fn posterior_sampling_needs_two_samples() {
    let model = toy_model(AttentionMode::Weibull { k: 2.0 });
    let params = model.init_params(&mut rng(2)).unwrap();
    let batch = model.split_batch(Split::Test).unwrap();
    assert!(posterior_sample(&model, &params, &batch, 1, false, &mut rng(0)).is_err());
}
