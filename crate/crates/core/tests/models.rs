mod common;

use std::sync::Arc;

use bam_core::attention::{AttentionConfig, AttentionMode, ForwardMode, ScoreFn};
use bam_core::autodiff::check::check_gradients;
use bam_core::autodiff::{Tape, Tensor, Var};
use bam_core::data::{synthetic_citation_graph, CitationParams, GraphDataset, SplitTag};
use bam_core::models::{
    generate_synthetic, AttentionClassifier, ClassifierConfig, GatConfig, GraphModel, SeqBatch, SyntheticModel,
    SyntheticParams,
};
use bam_core::objective::{loss, Model};
use bam_core::params::{ParamGroup, ParamStore};
use bam_core::prior::{PriorConfig, PriorFamily, PriorKind};
use common::{max_abs_diff, random, rng, TOL};

fn weibull_contextual() -> (AttentionMode, PriorConfig) {
    (
        AttentionMode::Weibull { k: 2.0 },
        PriorConfig {
            kind: PriorKind::Contextual,
            family: PriorFamily::Gamma,
            beta: 0.5,
            d_mid: 3,
            ..PriorConfig::default()
        },
    )
}

fn lognormal_contextual() -> (AttentionMode, PriorConfig) {
    (
        AttentionMode::Lognormal { sigma: 0.6 },
        PriorConfig {
            kind: PriorKind::Contextual,
            family: PriorFamily::Lognormal,
            sigma1: 0.8,
            d_mid: 3,
            ..PriorConfig::default()
        },
    )
}

/// Two layers of two heads with `d_k = d_v = 4`; 3 queries attend to 5 keys.
fn tiny_classifier(mode: AttentionMode, prior: PriorConfig, score_fn: ScoreFn) -> (AttentionClassifier, SeqBatch) {
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
        layers: vec![layer.clone(), layer],
        prior,
    };
    let batch = SeqBatch::new(random(vec![3, 3], 1), random(vec![5, 4], 2), vec![0, 2, 1], 1, true).unwrap();
    (AttentionClassifier::new(cfg).unwrap(), batch)
}

/// The full training objective at fixed noise.
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

#[test]
fn full_objective_gradients_match_finite_differences() {
    for (mode, prior) in [weibull_contextual(), lognormal_contextual()] {
        for score_fn in [ScoreFn::ScaledDotProduct, ScoreFn::AdditiveLeakyRelu { slope: 0.2 }] {
            let (model, batch) = tiny_classifier(mode, prior.clone(), score_fn);
            let mut store = model.init_params(&mut rng(5)).unwrap();
            // Nonzero biases keep prior-network units off the ReLU kink.
            for i in 0..store.len() {
                if store.entries()[i].name.ends_with("f1_b") {
                    let t = store.tensor_mut(i);
                    let n = t.len();
                    t.data_mut().copy_from_slice(&[0.3, -0.2, 0.25][..n]);
                }
            }
            let groups: Vec<ParamGroup> = store.entries().iter().map(|e| e.group).collect();
            assert!(groups.contains(&ParamGroup::Prior) && groups.contains(&ParamGroup::Bias));
            let inputs: Vec<Tensor> = store.entries().iter().map(|e| e.tensor.clone()).collect();
            let report = check_gradients(&inputs, 1e-5, |t, v| objective(&model, &batch, &groups, t, v)).unwrap();
            let worst = &store.entries()[report.worst.0].name;
            assert!(
                report.max_rel_error < TOL,
                "{mode:?} {score_fn:?}: relative error {} at {worst}[{}]",
                report.max_rel_error,
                report.worst.1
            );
        }
    }
}

#[test]
fn prior_network_learns_only_through_the_kl_term() {
    let (mode, prior) = weibull_contextual();
    let (model, batch) = tiny_classifier(mode, prior, ScoreFn::ScaledDotProduct);
    let store = model.init_params(&mut rng(5)).unwrap();
    for (weight, expect_zero) in [(0.0, true), (0.5, false)] {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let out = model.forward(&mut tape, &vars, &batch, ForwardMode::TRAIN, &mut rng(3)).unwrap();
        assert_eq!(out.kl_layers.len(), 2);
        let (total, _) = loss(&mut tape, out.logits, out.rows, out.targets, &out.kl_layers, weight, 0.0, &[]).unwrap();
        tape.backward(total).unwrap();
        let prior_grad: f64 = store
            .entries()
            .iter()
            .zip(&vars)
            .filter(|(e, _)| e.group == ParamGroup::Prior)
            .map(|(_, &v)| tape.grad(v).map_or(0.0, |g| g.iter().map(|x| x.abs()).sum()))
            .sum();
        assert_eq!(prior_grad == 0.0, expect_zero, "kl weight {weight}: prior gradient {prior_grad}");
    }
}

fn small_graph(seed: u64) -> GraphDataset {
    let p = CitationParams {
        nodes: 30,
        features: 12,
        classes: 3,
        edges: 50,
        words_per_node: 4,
        topic_fraction: 0.5,
        train_per_class: 3,
        val: 6,
        test: 9,
        ..CitationParams::default()
    };
    synthetic_citation_graph("small", &p, &mut rng(seed)).unwrap()
}

fn gat_config(mode: AttentionMode, prior: PriorConfig, dense: bool) -> GatConfig {
    GatConfig {
        hidden_heads: 3,
        hidden_dim: 4,
        output_heads: 2,
        mode,
        prior,
        dense,
        ..GatConfig::default()
    }
}

fn gat_logits(model: &GraphModel, params: &ParamStore, fwd: ForwardMode, seed: u64) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars = params.bind_constant(&mut tape);
    let out = model.forward(&mut tape, &vars, &model.all_nodes(), fwd, &mut rng(seed)).unwrap();
    tape.value(out.logits).data().to_vec()
}

#[test]
fn dense_and_sparse_graph_paths_agree() {
    let ds = small_graph(1);
    let none = (AttentionMode::Deterministic, PriorConfig::default());
    for (mode, prior) in [none, weibull_contextual(), lognormal_contextual()] {
        let dense = GraphModel::new(&ds, gat_config(mode, prior.clone(), true)).unwrap();
        let sparse = GraphModel::new(&ds, gat_config(mode, prior, false)).unwrap();
        let params = dense.init_params(&mut rng(2)).unwrap();
        params.check_layout(&sparse.init_params(&mut rng(2)).unwrap()).unwrap();
        for fwd in [ForwardMode::EVAL, ForwardMode::TRAIN, ForwardMode::posterior(false)] {
            let a = gat_logits(&dense, &params, fwd, 9);
            let b = gat_logits(&sparse, &params, fwd, 9);
            assert!(max_abs_diff(&a, &b) < 1e-10, "{mode:?} {fwd:?}");
        }
    }
}

#[test]
fn gat_kl_terms_agree_across_layouts() {
    let ds = small_graph(1);
    let (mode, prior) = weibull_contextual();
    let run = |dense| {
        let model = GraphModel::new(&ds, gat_config(mode, prior.clone(), dense)).unwrap();
        let params = model.init_params(&mut rng(2)).unwrap();
        let mut tape = Tape::new();
        let vars = params.bind_constant(&mut tape);
        let out = model.forward(&mut tape, &vars, &model.all_nodes(), ForwardMode::TRAIN, &mut rng(4)).unwrap();
        out.kl_layers.iter().map(|&k| tape.value(k).item().unwrap()).collect::<Vec<_>>()
    };
    let (a, b) = (run(true), run(false));
    assert_eq!(a.len(), 2);
    assert!(max_abs_diff(&a, &b) < 1e-10);
}

/// Copies every parameter of `from` that `to` also has.
fn transfer(from: &ParamStore, to: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for e in to.entries() {
        let t = from.get(&e.name).cloned().unwrap_or_else(|| e.tensor.clone());
        out.push(e.name.clone(), e.group, t).unwrap();
    }
    out
}

#[test]
fn evaluation_mode_matches_deterministic_logits() {
    let ds = small_graph(3);
    for dense in [true, false] {
        let det = GraphModel::new(&ds, gat_config(AttentionMode::Deterministic, PriorConfig::default(), dense)).unwrap();
        for (mode, prior) in [weibull_contextual(), lognormal_contextual()] {
            let bam = GraphModel::new(&ds, gat_config(mode, prior, dense)).unwrap();
            let bam_params = bam.init_params(&mut rng(6)).unwrap();
            let det_params = transfer(&bam_params, &det.init_params(&mut rng(0)).unwrap());
            let a = gat_logits(&bam, &bam_params, ForwardMode::EVAL, 1);
            let b = gat_logits(&det, &det_params, ForwardMode::EVAL, 2);
            assert_eq!(a, b, "dense = {dense}, {mode:?}");
        }
    }
}

#[test]
fn zero_attention_vector_averages_neighbors() {
    let mut ds = small_graph(4);
    ds.row_normalize = false;
    ds.features = random(vec![30, 4], 8);
    let cfg = GatConfig {
        hidden_heads: 2,
        hidden_dim: 4,
        output_heads: 1,
        ..GatConfig::default()
    };
    let model = GraphModel::new(&ds, cfg).unwrap();
    let mut params = model.init_params(&mut rng(1)).unwrap();
    for i in 0..params.len() {
        let name = params.entries()[i].name.clone();
        if name.starts_with("layer1.head") {
            let t = params.tensor_mut(i);
            if name.ends_with(".w") {
                *t = Tensor::identity(4).unwrap();
            } else {
                t.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }
    let mut tape = Tape::new();
    let vars = params.bind_constant(&mut tape);
    let out = model.forward(&mut tape, &vars, &model.all_nodes(), ForwardMode::EVAL, &mut rng(0)).unwrap();
    let pattern = ds.attention_pattern().unwrap();
    for head in &out.heads[0] {
        let o = tape.value(head.out);
        for i in 0..30 {
            let nbrs = &pattern.col_ids()[pattern.row_range(i)];
            for c in 0..4 {
                let mean = nbrs.iter().map(|&j| ds.features.at(j, c)).sum::<f64>() / nbrs.len() as f64;
                assert!((o.at(i, c) - mean).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn attention_stays_inside_neighborhoods() {
    let ds = small_graph(5);
    let pattern = ds.attention_pattern().unwrap();
    let mask = pattern.to_mask();
    for (mode, prior) in [(AttentionMode::Deterministic, PriorConfig::default()), weibull_contextual()] {
        for dense in [true, false] {
            let model = GraphModel::new(&ds, gat_config(mode, prior.clone(), dense)).unwrap();
            let params = model.init_params(&mut rng(1)).unwrap();
            let mut tape = Tape::new();
            let vars = params.bind_constant(&mut tape);
            let fwd = ForwardMode::posterior(false);
            let out = model.forward(&mut tape, &vars, &model.all_nodes(), fwd, &mut rng(2)).unwrap();
            for head in out.heads.iter().flatten() {
                let w = head.sample.densify(tape.value(head.sample.w).data()).unwrap();
                for i in 0..30 {
                    assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    for j in 0..30 {
                        if !mask.allowed(i, j) {
                            assert_eq!(w.at(i, j), 0.0);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn relabeling_nodes_permutes_the_logits() {
    let ds = small_graph(6);
    let mut perm: Vec<usize> = (0..30).collect();
    perm.reverse();
    perm.swap(3, 17);
    let permuted = ds.induced_subgraph(&perm, "permuted").unwrap();
    let cfg = gat_config(AttentionMode::Deterministic, PriorConfig::default(), false);
    let a = GraphModel::new(&ds, cfg.clone()).unwrap();
    let b = GraphModel::new(&permuted, cfg).unwrap();
    let params = a.init_params(&mut rng(1)).unwrap();
    let la = gat_logits(&a, &params, ForwardMode::EVAL, 0);
    let lb = gat_logits(&b, &params, ForwardMode::EVAL, 0);
    for (new, &old) in perm.iter().enumerate() {
        let diff = max_abs_diff(&lb[new * 3..new * 3 + 3], &la[old * 3..old * 3 + 3]);
        assert!(diff < 1e-12);
    }
}

#[test]
fn graph_model_rejects_bad_configs() {
    let ds = small_graph(1);
    let bad_pair = GatConfig {
        mode: AttentionMode::Weibull { k: 1.0 },
        prior: PriorConfig {
            kind: PriorKind::Fixed,
            family: PriorFamily::Lognormal,
            ..PriorConfig::default()
        },
        ..GatConfig::default()
    };
    assert!(GraphModel::new(&ds, bad_pair).is_err());
    assert!(GraphModel::new(&ds, GatConfig { hidden_heads: 0, ..GatConfig::default() }).is_err());
    let mut broken = ds.clone();
    broken.edges.push((0, 99));
    assert!(GraphModel::new(&broken, GatConfig::default()).is_err());
}

#[test]
fn graph_splits_become_batches() {
    let ds = small_graph(1);
    let model = GraphModel::new(&ds, GatConfig::default()).unwrap();
    let train = &model.train_batches(&mut rng(0)).unwrap()[0];
    assert_eq!(*train.rows, ds.split_nodes(SplitTag::Train));
    assert_eq!(train.rows.len(), 9);
    let test = model.split_batch(bam_core::objective::Split::Test).unwrap();
    assert!(test.rows.iter().zip(test.targets.iter()).all(|(&r, &t)| ds.labels[r] == t));
}

fn synthetic(signal: f64, count: usize, seed: u64) -> bam_core::models::SyntheticTask {
    let p = SyntheticParams {
        signal,
        train: count,
        val: 2,
        test: 2,
        ..SyntheticParams::default()
    };
    generate_synthetic(&p, &mut rng(seed)).unwrap()
}

#[test]
fn synthetic_generation_is_deterministic() {
    assert_eq!(synthetic(3.0, 50, 1).to_bytes(), synthetic(3.0, 50, 1).to_bytes());
    assert_ne!(synthetic(3.0, 50, 1).to_bytes(), synthetic(3.0, 50, 2).to_bytes());
}

/// The Bayes rule with full knowledge of the generator: align the query
/// with every key, then read the class code of the best-aligned key.
fn aligned_class_accuracy(task: &bam_core::models::SyntheticTask) -> f64 {
    let (n, d, c) = (task.params.n, task.params.d, task.params.classes);
    let s = &task.train;
    let mut correct = 0;
    for i in 0..s.len() {
        let q = s.queries.row(i);
        let key = |j: usize| &s.keys.data()[(i * n + j) * d..(i * n + j + 1) * d];
        let score = |j: usize| q.iter().zip(key(j)).map(|(a, b)| a * b).sum::<f64>();
        let best = (0..n).max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap();
        let code = &key(best)[..c];
        let class = (0..c).max_by(|&a, &b| code[a].total_cmp(&code[b])).unwrap();
        correct += usize::from(class == s.labels[i]);
    }
    correct as f64 / s.len() as f64
}

#[test]
fn strong_signal_makes_the_task_solvable() {
    let task = synthetic(1e6, 2000, 3);
    let s = &task.train;
    for i in 0..s.len() {
        assert_eq!(s.labels[i], s.key_classes[i * task.params.n + s.designated[i]]);
    }
    assert_eq!(aligned_class_accuracy(&task), 1.0);
}

#[test]
fn zero_signal_leaves_chance_accuracy() {
    let task = synthetic(0.0, 20_000, 4);
    let acc = aligned_class_accuracy(&task);
    let chance = 1.0 / task.params.classes as f64;
    let se = (chance * (1.0 - chance) / 20_000.0).sqrt();
    assert!((acc - chance).abs() < 4.0 * se, "{acc}");
}

#[test]
fn synthetic_params_are_validated() {
    for p in [
        SyntheticParams { n: 1, ..SyntheticParams::default() },
        SyntheticParams { d: 4, ..SyntheticParams::default() },
        SyntheticParams { classes: 1, ..SyntheticParams::default() },
    ] {
        assert!(generate_synthetic(&p, &mut rng(0)).is_err(), "{p:?}");
    }
}

fn one_layer(mode: AttentionMode) -> AttentionClassifier {
    AttentionClassifier::new(ClassifierConfig {
        d_query: 4,
        d_key: 4,
        classes: 2,
        layers: vec![AttentionConfig {
            mode,
            heads: 1,
            score_fn: ScoreFn::ScaledDotProduct,
            d_k: 4,
            d_v: 4,
            weight_dropout: 0.0,
        }],
        prior: PriorConfig::default(),
    })
    .unwrap()
}

#[test]
fn single_key_gets_full_weight() {
    let model = one_layer(AttentionMode::Weibull { k: 3.0 });
    let params = model.init_params(&mut rng(1)).unwrap();
    let key = random(vec![1, 4], 2);
    let batch = SeqBatch::new(random(vec![1, 4], 3), key.clone(), vec![1], 1, true).unwrap();
    let mut tape = Tape::new();
    let vars = params.bind_constant(&mut tape);
    let out = model.forward(&mut tape, &vars, &batch, ForwardMode::TRAIN, &mut rng(4)).unwrap();
    assert_eq!(tape.value(out.heads[0][0].sample.w).data(), &[1.0]);

    let mut t2 = Tape::new();
    let k = t2.constant(key);
    let m_v = t2.constant(params.get("layer0.head0.m_v").unwrap().clone());
    let w = t2.constant(params.get("out.w").unwrap().clone());
    let b = t2.constant(params.get("out.b").unwrap().clone());
    let v = t2.matmul(k, m_v).unwrap();
    let l = t2.matmul(v, w).unwrap();
    let l = t2.add(l, b).unwrap();
    assert!(max_abs_diff(tape.value(out.logits).data(), t2.value(l).data()) < 1e-14);
}

#[test]
fn vanishing_lognormal_scale_matches_deterministic_logits() {
    let task = Arc::new(synthetic(3.0, 40, 5));
    let det = SyntheticModel::new(one_layer_for(&task, AttentionMode::Deterministic), task.clone(), 40, false).unwrap();
    let ln = SyntheticModel::new(one_layer_for(&task, AttentionMode::Lognormal { sigma: 1e-9 }), task, 40, false).unwrap();
    let params = det.init_params(&mut rng(1)).unwrap();
    let batch = det.split_batch(bam_core::objective::Split::Train).unwrap();
    let logits = |m: &SyntheticModel, fwd| {
        let mut tape = Tape::new();
        let vars = params.bind_constant(&mut tape);
        let out = m.forward(&mut tape, &vars, &batch, fwd, &mut rng(2)).unwrap();
        tape.value(out.logits).data().to_vec()
    };
    let a = logits(&det, ForwardMode::EVAL);
    let b = logits(&ln, ForwardMode::posterior(false));
    assert!(max_abs_diff(&a, &b) < 1e-6);
}

fn one_layer_for(task: &bam_core::models::SyntheticTask, mode: AttentionMode) -> AttentionClassifier {
    let d = task.params.d;
    AttentionClassifier::new(ClassifierConfig {
        d_query: d,
        d_key: d,
        classes: task.params.classes,
        layers: vec![AttentionConfig {
            mode,
            heads: 1,
            score_fn: ScoreFn::ScaledDotProduct,
            d_k: d,
            d_v: d,
            weight_dropout: 0.0,
        }],
        prior: PriorConfig::default(),
    })
    .unwrap()
}

#[test]
fn batched_instances_do_not_see_each_other() {
    let model = one_layer(AttentionMode::Deterministic);
    let params = model.init_params(&mut rng(1)).unwrap();
    let q = random(vec![2, 4], 2);
    let k = random(vec![6, 4], 3);
    let logits = |dense: bool| {
        let batch = SeqBatch::new(q.clone(), k.clone(), vec![0, 1], 2, dense).unwrap();
        let mut tape = Tape::new();
        let vars = params.bind_constant(&mut tape);
        let out = model.forward(&mut tape, &vars, &batch, ForwardMode::EVAL, &mut rng(0)).unwrap();
        tape.value(out.logits).data().to_vec()
    };
    let both = logits(true);
    assert!(max_abs_diff(&both, &logits(false)) < 1e-12);
    let first = SeqBatch::new(
        Tensor::matrix(1, 4, q.row(0).to_vec()).unwrap(),
        Tensor::matrix(3, 4, k.data()[..12].to_vec()).unwrap(),
        vec![0],
        1,
        true,
    )
    .unwrap();
    let mut tape = Tape::new();
    let vars = params.bind_constant(&mut tape);
    let out = model.forward(&mut tape, &vars, &first, ForwardMode::EVAL, &mut rng(0)).unwrap();
    assert!(max_abs_diff(&both[..2], tape.value(out.logits).data()) < 1e-12);
}
