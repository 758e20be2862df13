//! The experiment configuration file.
//!
//! A run is described by one TOML file. Relative paths resolve against the
//! file's directory; `BAM_OUTPUT_ROOT` replaces that base for the output
//! directory. Unknown keys are rejected.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use bam_core::attention::{AttentionConfig, AttentionMode, ScoreFn};
use bam_core::data::load_graph;
use bam_core::models::{
    generate_synthetic, AttentionClassifier, ClassifierConfig, GatConfig, GraphModel, SyntheticModel, SyntheticParams,
};
use bam_core::objective::{AdamConfig, TrainConfig};
use bam_core::prior::{PriorConfig, PriorFamily, PriorKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const OUTPUT_ROOT_ENV: &str = "BAM_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Graph,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Deterministic,
    Weibull,
    Lognormal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionSection {
    pub mode: ModeName,
    /// Weibull shape.
    pub k: f64,
    /// Lognormal scale.
    pub sigma: f64,
    /// Dropout on normalized attention weights; the task default when unset.
    pub dropout: Option<f64>,
}

impl Default for AttentionSection {
    fn default() -> Self {
        AttentionSection {
            mode: ModeName::Deterministic,
            k: 1.0,
            sigma: 1.0,
            dropout: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSection {
    pub kind: PriorKind,
    /// Defaults to the family that pairs with the attention mode.
    pub family: Option<PriorFamily>,
    pub beta: f64,
    pub sigma1: f64,
    pub alpha_fixed: f64,
    pub mu_fixed: f64,
    pub d_mid: usize,
    pub share_heads: bool,
}

impl Default for PriorSection {
    fn default() -> Self {
        let p = PriorConfig::default();
        PriorSection {
            kind: p.kind,
            family: None,
            beta: p.beta,
            sigma1: p.sigma1,
            alpha_fixed: p.alpha_fixed,
            mu_fixed: p.mu_fixed,
            d_mid: p.d_mid,
            share_heads: p.share_heads,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub l2_lambda: f64,
    /// KL anneal rate.
    pub rho: f64,
    pub anneal_offset: f64,
    pub patience: u64,
    pub max_epochs: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr: t.adam.lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            l2_lambda: t.l2_lambda,
            rho: t.rho,
            anneal_offset: t.anneal_offset,
            patience: t.patience,
            max_epochs: t.max_epochs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UncertaintySection {
    /// Posterior samples per instance.
    pub samples: usize,
    pub p_threshold: f64,
}

impl Default for UncertaintySection {
    fn default() -> Self {
        UncertaintySection {
            samples: 20,
            p_threshold: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub n: usize,
    pub d: usize,
    pub classes: usize,
    pub signal: f64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Seed of the generated dataset, independent of the training seeds.
    pub data_seed: u64,
    pub batch_size: usize,
    pub heads: usize,
    /// Per-head key width; `d` when unset.
    pub d_k: Option<usize>,
    pub dense: bool,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let p = SyntheticParams::default();
        SyntheticSection {
            n: p.n,
            d: p.d,
            classes: p.classes,
            signal: p.signal,
            train: p.train,
            val: p.val,
            test: p.test,
            data_seed: 0,
            batch_size: 50,
            heads: 1,
            d_k: None,
            dense: false,
        }
    }
}

impl SyntheticSection {
    pub fn params(&self) -> SyntheticParams {
        SyntheticParams {
            n: self.n,
            d: self.d,
            classes: self.classes,
            signal: self.signal,
            train: self.train,
            val: self.val,
            test: self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    /// Dataset manifest.
    pub dataset: PathBuf,
    #[serde(default = "GraphSection::default_heads")]
    pub hidden_heads: usize,
    #[serde(default = "GraphSection::default_heads")]
    pub hidden_dim: usize,
    #[serde(default = "GraphSection::default_output_heads")]
    pub output_heads: usize,
    #[serde(default = "GraphSection::default_slope")]
    pub slope: f64,
    #[serde(default = "GraphSection::default_dropout")]
    pub input_dropout: f64,
    #[serde(default)]
    pub dense: bool,
}

impl GraphSection {
    fn default_heads() -> usize {
        8
    }

    fn default_output_heads() -> usize {
        1
    }

    fn default_slope() -> f64 {
        0.2
    }

    fn default_dropout() -> f64 {
        0.6
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    #[serde(default = "ExperimentConfig::default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "ExperimentConfig::default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub attention: AttentionSection,
    #[serde(default)]
    pub prior: PriorSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub uncertainty: UncertaintySection,
    pub synthetic: Option<SyntheticSection>,
    pub graph: Option<GraphSection>,
    /// Directory relative paths resolve against; set by [`ExperimentConfig::load`].
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must be positive, got {v}")))
    }
}

fn probability(name: &str, v: f64) -> Result<()> {
    if (0.0..1.0).contains(&v) {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must lie in [0, 1), got {v}")))
    }
}

fn nonzero(name: &str, v: usize) -> Result<()> {
    if v > 0 {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must be positive")))
    }
}

impl ExperimentConfig {
    fn default_seeds() -> Vec<u64> {
        vec![0]
    }

    fn default_output() -> PathBuf {
        PathBuf::from("runs")
    }

    /// Parses and validates a configuration file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, path, base)
    }

    /// Parses configuration text whose relative paths resolve against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        Self::parse(text, Path::new("<config>"), base_dir.to_path_buf())
    }

    fn parse(text: &str, label: &Path, base_dir: PathBuf) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|source| CliError::ConfigSyntax {
            path: label.to_path_buf(),
            source,
        })?;
        cfg.base_dir = base_dir;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.task, &self.synthetic, &self.graph) {
            (Task::Graph, _, None) => {
                return Err(CliError::Config("task = \"graph\" requires a [graph] section with a dataset".into()))
            }
            (Task::Graph, Some(_), _) => {
                return Err(CliError::Config("[synthetic] section given but task = \"graph\"".into()))
            }
            (Task::Synthetic, _, Some(_)) => {
                return Err(CliError::Config("[graph] section given but task = \"synthetic\"".into()))
            }
            _ => {}
        }
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must list at least one seed".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::Config("seeds must be distinct".into()));
        }

        let a = &self.attention;
        match a.mode {
            ModeName::Weibull => positive("attention.k", a.k)?,
            ModeName::Lognormal => positive("attention.sigma", a.sigma)?,
            ModeName::Deterministic => {}
        }
        if let Some(p) = a.dropout {
            probability("attention.dropout", p)?;
        }
        let family = self.prior_family();
        if self.prior.kind != PriorKind::None {
            match (a.mode, family) {
                (ModeName::Weibull, PriorFamily::Lognormal) => {
                    return Err(CliError::Config(
                        "attention.mode = \"weibull\" conflicts with prior.family = \"lognormal\"; Weibull attention pairs with a gamma prior".into(),
                    ))
                }
                (ModeName::Lognormal, PriorFamily::Gamma) => {
                    return Err(CliError::Config(
                        "attention.mode = \"lognormal\" conflicts with prior.family = \"gamma\"; Lognormal attention pairs with a lognormal prior".into(),
                    ))
                }
                _ => {}
            }
        }
        self.prior_config().validate()?;

        let t = &self.train;
        positive("train.lr", t.lr)?;
        positive("train.adam_eps", t.adam_eps)?;
        probability("train.beta1", t.beta1)?;
        probability("train.beta2", t.beta2)?;
        positive("train.rho", t.rho)?;
        if !(t.l2_lambda >= 0.0 && t.l2_lambda.is_finite()) {
            return Err(CliError::Config(format!("train.l2_lambda must be nonnegative, got {}", t.l2_lambda)));
        }
        if !t.anneal_offset.is_finite() {
            return Err(CliError::Config("train.anneal_offset must be finite".into()));
        }
        if t.patience == 0 || t.max_epochs == 0 {
            return Err(CliError::Config("train.patience and train.max_epochs must be positive".into()));
        }

        let u = &self.uncertainty;
        if u.samples < 2 {
            return Err(CliError::Config(format!("uncertainty.samples must be at least 2, got {}", u.samples)));
        }
        if !(u.p_threshold > 0.0 && u.p_threshold < 1.0) {
            return Err(CliError::Config(format!(
                "uncertainty.p_threshold must lie in (0, 1), got {}",
                u.p_threshold
            )));
        }

        if let Some(s) = &self.synthetic {
            s.params().validate()?;
            nonzero("synthetic.batch_size", s.batch_size)?;
            nonzero("synthetic.heads", s.heads)?;
            if let Some(d_k) = s.d_k {
                nonzero("synthetic.d_k", d_k)?;
            }
        }
        if let Some(g) = &self.graph {
            nonzero("graph.hidden_heads", g.hidden_heads)?;
            nonzero("graph.hidden_dim", g.hidden_dim)?;
            nonzero("graph.output_heads", g.output_heads)?;
            probability("graph.input_dropout", g.input_dropout)?;
            if !(g.slope >= 0.0 && g.slope.is_finite()) {
                return Err(CliError::Config(format!("graph.slope must be nonnegative, got {}", g.slope)));
            }
        }
        Ok(())
    }

    pub fn mode(&self) -> AttentionMode {
        match self.attention.mode {
            ModeName::Deterministic => AttentionMode::Deterministic,
            ModeName::Weibull => AttentionMode::Weibull { k: self.attention.k },
            ModeName::Lognormal => AttentionMode::Lognormal {
                sigma: self.attention.sigma,
            },
        }
    }

    fn prior_family(&self) -> PriorFamily {
        self.prior.family.unwrap_or(match self.attention.mode {
            ModeName::Lognormal => PriorFamily::Lognormal,
            _ => PriorFamily::Gamma,
        })
    }

    pub fn prior_config(&self) -> PriorConfig {
        let p = &self.prior;
        PriorConfig {
            kind: p.kind,
            family: self.prior_family(),
            beta: p.beta,
            sigma1: p.sigma1,
            alpha_fixed: p.alpha_fixed,
            mu_fixed: p.mu_fixed,
            d_mid: p.d_mid,
            share_heads: p.share_heads,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            adam: AdamConfig {
                lr: t.lr,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.adam_eps,
            },
            l2_lambda: t.l2_lambda,
            rho: t.rho,
            anneal_offset: t.anneal_offset,
            patience: t.patience,
            max_epochs: t.max_epochs,
        }
    }

    /// Attention dropout with the task default applied.
    pub fn attention_dropout(&self) -> f64 {
        self.attention.dropout.unwrap_or(match self.task {
            Task::Graph => 0.6,
            Task::Synthetic => 0.0,
        })
    }

    /// Whether posterior samples keep dropout active.
    pub fn sample_with_dropout(&self) -> bool {
        self.attention_dropout() > 0.0 || self.graph.as_ref().is_some_and(|g| g.input_dropout > 0.0)
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    /// The output directory, re-rooted under `root` when one is given.
    pub fn output_dir_under(&self, root: Option<&Path>) -> PathBuf {
        match root {
            Some(root) if self.output_dir.is_relative() => root.join(&self.output_dir),
            _ => self.resolve(&self.output_dir),
        }
    }

    /// The output directory honoring `BAM_OUTPUT_ROOT`.
    pub fn output_dir(&self) -> PathBuf {
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
        self.output_dir_under(root.as_deref())
    }

    /// Builds the model the configuration describes, loading or generating
    /// its data.
    pub fn build(&self) -> Result<Experiment> {
        match self.task {
            Task::Synthetic => {
                let s = self.synthetic.clone().unwrap_or_default();
                let params = s.params();
                let task = generate_synthetic(&params, &mut ChaCha8Rng::seed_from_u64(s.data_seed))?;
                let d_k = s.d_k.unwrap_or(s.d);
                let cfg = ClassifierConfig {
                    d_query: s.d,
                    d_key: s.d,
                    classes: s.classes,
                    layers: vec![AttentionConfig {
                        mode: self.mode(),
                        heads: s.heads,
                        score_fn: ScoreFn::ScaledDotProduct,
                        d_k,
                        d_v: d_k,
                        weight_dropout: self.attention_dropout(),
                    }],
                    prior: self.prior_config(),
                };
                let model = SyntheticModel::new(AttentionClassifier::new(cfg)?, Arc::new(task), s.batch_size, s.dense)?;
                Ok(Experiment::Synthetic(model))
            }
            Task::Graph => {
                let g = self.graph.as_ref().expect("validated");
                let dataset = load_graph(&self.resolve(&g.dataset))?;
                let cfg = GatConfig {
                    hidden_heads: g.hidden_heads,
                    hidden_dim: g.hidden_dim,
                    output_heads: g.output_heads,
                    slope: g.slope,
                    input_dropout: g.input_dropout,
                    attention_dropout: self.attention_dropout(),
                    mode: self.mode(),
                    prior: self.prior_config(),
                    dense: g.dense,
                };
                Ok(Experiment::Graph(GraphModel::new(&dataset, cfg)?))
            }
        }
    }
}

/// A model ready to train, one variant per task.
#[derive(Clone, Debug)]
pub enum Experiment {
    Synthetic(SyntheticModel),
    Graph(GraphModel),
}
