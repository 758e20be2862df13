//! The `train`, `eval` and `dump-attention` commands.

use std::fmt::Write as _;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use bam_core::attention::ForwardMode;
use bam_core::autodiff::Tape;
use bam_core::objective::{evaluate, train, MetricsRecord, Model, Split, TrainOutcome};
use bam_core::params::{ParamGroup, ParamStore};
use bam_core::uncertainty::{certainty, pavpu, posterior_sample, PavpuCounts};
use bam_core::BamError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Experiment, ExperimentConfig};
use crate::error::{CliError, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CERTAINTY_FILE: &str = "certainty.tsv";

pub fn params_file(seed: u64) -> String {
    format!("params-seed{seed}.txt")
}

/// Seed of the noise used by `eval` and `dump-attention`.
fn inference_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seeds[0]
}

/// Append-only line writer; every line reaches the file before the next
/// record is produced.
struct LineWriter {
    path: PathBuf,
    file: File,
}

impl LineWriter {
    fn create(path: PathBuf) -> Result<Self> {
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(LineWriter { path, file })
    }

    fn write<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let mut line = serde_json::to_string(value)?;
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(|e| CliError::io(&self.path, e))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Per-epoch step timing, kept apart from the metrics so that metrics files
/// stay byte-identical across runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub seed: u64,
    pub epoch: u64,
    pub steps: u64,
    pub mean_step_ms: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub best_epoch: u64,
    pub epochs_run: u64,
    pub best_val_nll: f64,
    pub test_nll: f64,
    pub test_accuracy: f64,
    pub test_pavpu: f64,
}

/// Mean and sample standard deviation; the deviation is absent for a single
/// value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: Option<f64>,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = (xs.len() > 1).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        MeanStd { mean, std }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.std {
            Some(s) => write!(f, "{:.4} ± {:.4}", self.mean, s),
            None => write!(f, "{:.4}", self.mean),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub runs: Vec<SeedResult>,
    pub test_accuracy: MeanStd,
    pub test_pavpu: MeanStd,
}

/// Posterior-sample uncertainty on the test split.
#[derive(Clone, Debug, PartialEq)]
pub struct Uncertainty {
    pub pavpu: f64,
    pub counts: PavpuCounts,
    /// Per test instance: row id, label, posterior-mean prediction, certain.
    pub flags: Vec<(usize, usize, usize, bool)>,
}

fn test_uncertainty<M: Model>(model: &M, params: &ParamStore, cfg: &ExperimentConfig, seed: u64) -> Result<Uncertainty> {
    let batch = model.split_batch(Split::Test)?;
    // The labeled rows and their targets come from a deterministic pass.
    let mut tape = Tape::new();
    let vars = params.bind_constant(&mut tape);
    let out = model.forward(&mut tape, &vars, &batch, ForwardMode::EVAL, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = &cfg.uncertainty;
    let preds = posterior_sample(model, params, &batch, u.samples, cfg.sample_with_dropout(), &mut rng)?;
    let certain = certainty(&preds, u.p_threshold)?;
    let predicted = preds.predictions();
    let accurate: Vec<bool> = predicted.iter().zip(out.targets.iter()).map(|(p, t)| p == t).collect();
    let (score, counts) = pavpu(&accurate, &certain)?;
    let flags = out
        .rows
        .iter()
        .zip(out.targets.iter())
        .zip(predicted.iter().zip(&certain))
        .map(|((&r, &t), (&p, &c))| (r, t, p, c))
        .collect();
    Ok(Uncertainty {
        pavpu: score,
        counts,
        flags,
    })
}

fn timing_records(outcome: &TrainOutcome, seed: u64) -> Vec<TimingRecord> {
    let mut out = Vec::new();
    let mut done = 0usize;
    for r in outcome.history.iter().filter(|r| r.split == Split::Train) {
        let steps = r.step as usize - done;
        let ms = &outcome.step_ms[done..done + steps];
        let wall: f64 = ms.iter().sum();
        out.push(TimingRecord {
            seed,
            epoch: r.epoch,
            steps: steps as u64,
            mean_step_ms: wall / steps.max(1) as f64,
            wall_ms: wall,
        });
        done += steps;
    }
    out
}

fn train_seeds<M: Model>(model: &M, cfg: &ExperimentConfig, dir: &Path, log: &mut dyn Write) -> Result<TrainSummary> {
    let mut metrics = LineWriter::create(dir.join(METRICS_FILE))?;
    let mut timing = LineWriter::create(dir.join(TIMING_FILE))?;
    let train_cfg = cfg.train_config();
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let outcome = train(model, &train_cfg, seed, |r| {
            metrics.write(r).map_err(|e| match e {
                CliError::Io { path, source } => BamError::Io { path, source },
                other => BamError::Validation(other.to_string()),
            })
        })?;
        for t in timing_records(&outcome, seed) {
            timing.write(&t)?;
        }
        let (test_nll, test_acc) = evaluate(model, &outcome.params, Split::Test, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let unc = test_uncertainty(model, &outcome.params, cfg, seed)?;
        let last = outcome.history.last().expect("at least one epoch");
        metrics.write(&MetricsRecord {
            seed,
            epoch: outcome.best_epoch,
            step: last.step,
            split: Split::Test,
            nll: test_nll,
            kl: 0.0,
            l2: 0.0,
            total: test_nll,
            kl_weight: last.kl_weight,
            accuracy: test_acc,
            pavpu: Some(unc.pavpu),
            wall_ms: None,
        })?;
        let params_path = dir.join(params_file(seed));
        outcome.params.save(&params_path)?;
        let _ = writeln!(
            log,
            "seed {seed}: {} epochs, best epoch {}, test accuracy {test_acc:.4}, PAvPU {:.4}",
            outcome.epochs_run, outcome.best_epoch, unc.pavpu
        );
        runs.push(SeedResult {
            seed,
            best_epoch: outcome.best_epoch,
            epochs_run: outcome.epochs_run,
            best_val_nll: outcome.best_val_nll,
            test_nll,
            test_accuracy: test_acc,
            test_pavpu: unc.pavpu,
        });
    }
    let acc: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
    let pv: Vec<f64> = runs.iter().map(|r| r.test_pavpu).collect();
    let summary = TrainSummary {
        runs,
        test_accuracy: MeanStd::of(&acc),
        test_pavpu: MeanStd::of(&pv),
    };
    let path = dir.join(SUMMARY_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| CliError::io(&path, e))?;
    let _ = writeln!(
        log,
        "test accuracy {} over {} seed(s); PAvPU {}",
        summary.test_accuracy,
        acc.len(),
        summary.test_pavpu
    );
    Ok(summary)
}

/// Trains one model per seed, writing metrics, timing, parameters and a
/// summary into `dir`.
pub fn cmd_train(cfg: &ExperimentConfig, dir: &Path, log: &mut dyn Write) -> Result<TrainSummary> {
    create_dir(dir)?;
    match cfg.build()? {
        Experiment::Synthetic(m) => train_seeds(&m, cfg, dir, log),
        Experiment::Graph(m) => train_seeds(&m, cfg, dir, log),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub nll: f64,
    pub uncertainty: Uncertainty,
}

fn load_params<M: Model>(model: &M, path: &Path) -> Result<ParamStore> {
    let params = ParamStore::load(path)?;
    let expected = model.init_params(&mut ChaCha8Rng::seed_from_u64(0))?;
    expected.check_layout(&params)?;
    Ok(params)
}

fn eval_model<M: Model>(model: &M, cfg: &ExperimentConfig, params_path: &Path) -> Result<EvalReport> {
    let params = load_params(model, params_path)?;
    let seed = inference_seed(cfg);
    let (nll, accuracy) = evaluate(model, &params, Split::Test, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let uncertainty = test_uncertainty(model, &params, cfg, seed)?;
    Ok(EvalReport {
        accuracy,
        nll,
        uncertainty,
    })
}

/// Point-estimate test accuracy plus posterior-sample PAvPU; per-instance
/// certainty flags go to `certainty.tsv` in `dir`.
pub fn cmd_eval(cfg: &ExperimentConfig, params_path: &Path, dir: &Path, log: &mut dyn Write) -> Result<EvalReport> {
    let report = match cfg.build()? {
        Experiment::Synthetic(m) => eval_model(&m, cfg, params_path)?,
        Experiment::Graph(m) => eval_model(&m, cfg, params_path)?,
    };
    create_dir(dir)?;
    let mut tsv = String::from("instance\tlabel\tprediction\taccurate\tcertain\n");
    for &(r, t, p, c) in &report.uncertainty.flags {
        let _ = writeln!(tsv, "{r}\t{t}\t{p}\t{}\t{}", u8::from(p == t), u8::from(c));
    }
    let path = dir.join(CERTAINTY_FILE);
    std::fs::write(&path, tsv).map_err(|e| CliError::io(&path, e))?;
    let c = &report.uncertainty.counts;
    let _ = writeln!(log, "test accuracy {:.4}", report.accuracy);
    let _ = writeln!(log, "test nll {:.4}", report.nll);
    let _ = writeln!(
        log,
        "PAvPU {:.4} ({} samples, p < {}): accurate+certain {}, accurate+uncertain {}, inaccurate+certain {}, inaccurate+uncertain {}",
        report.uncertainty.pavpu,
        cfg.uncertainty.samples,
        cfg.uncertainty.p_threshold,
        c.n_ac,
        c.n_au,
        c.n_ic,
        c.n_iu
    );
    let _ = writeln!(log, "certainty flags written to {}", path.display());
    Ok(report)
}

/// Files written by `dump-attention`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDump {
    pub weights: PathBuf,
    /// Absent without a contextual prior.
    pub psi: Option<PathBuf>,
}

fn dump_model<M: Model>(
    model: &M,
    cfg: &ExperimentConfig,
    params_path: &Path,
    layer: usize,
    head: usize,
    segment_len: usize,
    dir: &Path,
) -> Result<AttentionDump> {
    let params = load_params(model, params_path)?;
    let batch = model.split_batch(Split::Test)?;
    let seed = inference_seed(cfg);
    let run = |fwd: ForwardMode| -> Result<(Vec<usize>, Vec<usize>, Vec<f64>, Option<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars = params.bind_constant(&mut tape);
        let out = model.forward(&mut tape, &vars, &batch, fwd, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let heads = out.heads.get(layer).ok_or_else(|| {
            CliError::Config(format!("layer {layer} out of range: the model has {} layers", out.heads.len()))
        })?;
        let h = heads
            .get(head)
            .ok_or_else(|| CliError::Config(format!("head {head} out of range: layer {layer} has {} heads", heads.len())))?;
        let pattern = &h.sample.pattern;
        let psi = out.psi[layer][head].map(|p| tape.value(p).data().to_vec());
        Ok((pattern.row_ids().to_vec(), pattern.col_ids().to_vec(), tape.value(h.sample.w).data().to_vec(), psi))
    };
    let (rows, cols, expected, psi) = run(ForwardMode::EVAL)?;
    let (_, _, sampled, _) = run(ForwardMode::posterior(false))?;

    create_dir(dir)?;
    let mut tsv = String::from("query\tkey\texpected\tsampled\n");
    for i in 0..rows.len() {
        let _ = writeln!(tsv, "{}\t{}\t{:e}\t{:e}", rows[i], cols[i], expected[i], sampled[i]);
    }
    let weights = dir.join(format!("attention-l{layer}-h{head}.tsv"));
    std::fs::write(&weights, tsv).map_err(|e| CliError::io(&weights, e))?;

    let psi = match psi {
        Some(psi) => {
            let mut tsv = String::from("segment\tkey\tpsi\n");
            for (j, p) in psi.iter().enumerate() {
                let _ = writeln!(tsv, "{}\t{j}\t{p:e}", j / segment_len);
            }
            let path = dir.join(format!("psi-l{layer}-h{head}.tsv"));
            std::fs::write(&path, tsv).map_err(|e| CliError::io(&path, e))?;
            Some(path)
        }
        None => None,
    };
    Ok(AttentionDump { weights, psi })
}

/// Writes expected and sampled attention weights of one head on the test
/// split as `query, key, weight` triplets, plus the prior `Ψ` when the model
/// has a contextual prior.
pub fn cmd_dump_attention(
    cfg: &ExperimentConfig,
    params_path: &Path,
    layer: usize,
    head: usize,
    dir: &Path,
    log: &mut dyn Write,
) -> Result<AttentionDump> {
    let dump = match cfg.build()? {
        Experiment::Synthetic(m) => {
            let n = m.task.params.n;
            dump_model(&m, cfg, params_path, layer, head, n, dir)?
        }
        Experiment::Graph(m) => {
            let n = m.labels.len();
            dump_model(&m, cfg, params_path, layer, head, n, dir)?
        }
    };
    let _ = writeln!(log, "attention weights written to {}", dump.weights.display());
    match &dump.psi {
        Some(p) => {
            let _ = writeln!(log, "prior Ψ written to {}", p.display());
        }
        None => {
            let _ = writeln!(log, "no contextual prior; Ψ not written");
        }
    }
    Ok(dump)
}

/// Scalar parameter counts of a freshly initialized model: total and the
/// contextual-prior share.
pub fn parameter_counts(cfg: &ExperimentConfig) -> Result<(usize, usize)> {
    let store = match cfg.build()? {
        Experiment::Synthetic(m) => m.init_params(&mut ChaCha8Rng::seed_from_u64(0))?,
        Experiment::Graph(m) => m.init_params(&mut ChaCha8Rng::seed_from_u64(0))?,
    };
    Ok((store.scalar_count(None), store.scalar_count(Some(ParamGroup::Prior))))
}
