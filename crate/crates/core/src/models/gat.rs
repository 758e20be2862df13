//! Two-layer graph attention network for transductive node classification.
//!
//! Layer 1 runs `H₁` heads of additive attention over each node's
//! neighborhood (self-loop included), adds a bias, applies ELU and
//! concatenates. Layer 2 runs `H₂` heads producing class scores, which are
//! averaged. Within a head the same matrix projects queries, keys and values.
//! Dropout hits both layers' inputs and the normalized attention weights.

use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attend_heads, draw_layer_noise, AdditiveParams, AttentionConfig, AttentionMode, ForwardMode, HeadOutput,
    HeadProjections, ScoreFn, Support,
};
use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{GraphDataset, SplitTag};
use crate::error::{BamError, Result};
use crate::objective::{ForwardOutput, Model, Split};
use crate::params::{ParamGroup, ParamStore};
use crate::prior::PriorConfig;

use super::{layer_prior_terms, push_prior_nets, read_prior_nets, Cursor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatConfig {
    pub hidden_heads: usize,
    pub hidden_dim: usize,
    /// Output heads; their class scores are averaged.
    pub output_heads: usize,
    pub slope: f64,
    pub input_dropout: f64,
    pub attention_dropout: f64,
    pub mode: AttentionMode,
    pub prior: PriorConfig,
    /// Masked dense attention instead of the edge-list path.
    pub dense: bool,
}

impl Default for GatConfig {
    fn default() -> Self {
        GatConfig {
            hidden_heads: 8,
            hidden_dim: 8,
            output_heads: 1,
            slope: 0.2,
            input_dropout: 0.6,
            attention_dropout: 0.6,
            mode: AttentionMode::Deterministic,
            prior: PriorConfig::default(),
            dense: false,
        }
    }
}

impl GatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_heads == 0 || self.hidden_dim == 0 || self.output_heads == 0 {
            return Err(BamError::Config("GAT head counts and widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.input_dropout) {
            return Err(BamError::Config(format!("dropout must lie in [0, 1), got {}", self.input_dropout)));
        }
        self.prior.validate()?;
        self.prior.check_pairing(self.mode)?;
        self.layer(1, 1).validate()
    }

    fn layer(&self, index: usize, classes: usize) -> AttentionConfig {
        let (heads, width) = if index == 0 {
            (self.hidden_heads, self.hidden_dim)
        } else {
            (self.output_heads, classes)
        };
        AttentionConfig {
            mode: self.mode,
            heads,
            score_fn: ScoreFn::AdditiveLeakyRelu { slope: self.slope },
            d_k: width,
            d_v: width,
            weight_dropout: self.attention_dropout,
        }
    }
}

/// Labeled nodes scored by one forward pass.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub rows: Arc<Vec<usize>>,
    pub targets: Arc<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct GraphModel {
    pub cfg: GatConfig,
    /// Preprocessed features.
    pub features: Arc<Tensor>,
    pub support: Support,
    pub classes: usize,
    pub labels: Vec<usize>,
    splits: Vec<SplitTag>,
}

impl GraphModel {
    pub fn new(dataset: &GraphDataset, cfg: GatConfig) -> Result<Self> {
        cfg.validate()?;
        dataset.validate()?;
        let pattern = dataset.attention_pattern()?;
        let n = dataset.num_nodes();
        let support = if cfg.dense {
            Support::dense(n, n, Some(pattern.to_mask()))?
        } else {
            Support::sparse(Arc::new(pattern))?
        };
        Ok(GraphModel {
            cfg,
            features: Arc::new(dataset.model_features()),
            support,
            classes: dataset.classes,
            labels: dataset.labels.clone(),
            splits: dataset.splits.clone(),
        })
    }

    fn batch_for(&self, tag: SplitTag) -> Result<GraphBatch> {
        let rows: Vec<usize> = (0..self.labels.len()).filter(|&i| self.splits[i] == tag).collect();
        if rows.is_empty() {
            return Err(BamError::Validation(format!("no {tag:?} nodes")));
        }
        let targets = rows.iter().map(|&i| self.labels[i]).collect();
        Ok(GraphBatch {
            rows: Arc::new(rows),
            targets: Arc::new(targets),
        })
    }

    /// Every node as a batch, labels included; useful for inspection.
    pub fn all_nodes(&self) -> GraphBatch {
        GraphBatch {
            rows: Arc::new((0..self.labels.len()).collect()),
            targets: Arc::new(self.labels.clone()),
        }
    }

    fn push_layer(&self, store: &mut ParamStore, index: usize, d_in: usize, rng: &mut dyn RngCore) -> Result<()> {
        let layer = self.cfg.layer(index, self.classes);
        let name = format!("layer{}", index + 1);
        for h in 0..layer.heads {
            let p = format!("{name}.head{h}");
            store.push(format!("{p}.w"), ParamGroup::Weight, Tensor::glorot(d_in, layer.d_k, rng)?)?;
            store.push(format!("{p}.a_q"), ParamGroup::Weight, Tensor::glorot(layer.d_k, 1, rng)?)?;
            store.push(format!("{p}.a_k"), ParamGroup::Weight, Tensor::glorot(layer.d_k, 1, rng)?)?;
        }
        push_prior_nets(store, &name, &self.cfg.prior, layer.mode, layer.heads, layer.d_k, rng)?;
        let bias_width = if index == 0 { layer.heads * layer.d_v } else { layer.d_v };
        store.push(format!("{name}.bias"), ParamGroup::Bias, Tensor::zeros(vec![1, bias_width])?)?;
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn run_layer(
        &self,
        tape: &mut Tape,
        cursor: &mut Cursor<'_>,
        index: usize,
        x: Var,
        fwd: ForwardMode,
        rng: &mut dyn RngCore,
    ) -> Result<(Var, Option<Var>, Vec<HeadOutput>, Vec<Option<Var>>)> {
        let layer = self.cfg.layer(index, self.classes);
        let mut ws = Vec::with_capacity(layer.heads);
        let mut additive = Vec::with_capacity(layer.heads);
        for _ in 0..layer.heads {
            ws.push(cursor.next()?);
            additive.push(AdditiveParams {
                a_q: cursor.next()?,
                a_k: cursor.next()?,
            });
        }
        // One pass over the inputs for all heads, then per-head column blocks.
        let w_all = tape.concat(&ws, 1)?;
        let projected = tape.matmul(x, w_all)?;
        let mut heads = Vec::with_capacity(layer.heads);
        for (h, a) in additive.into_iter().enumerate() {
            let p = if layer.heads == 1 {
                projected
            } else {
                tape.slice_cols(projected, h * layer.d_k, layer.d_k)?
            };
            heads.push(HeadProjections {
                q: p,
                k: p,
                v: p,
                additive: Some(a),
            });
        }
        let nets = read_prior_nets(cursor, &self.cfg.prior, layer.mode, layer.heads)?;
        let bias = cursor.next()?;
        let noise = if fwd.sample {
            draw_layer_noise(layer.mode, layer.heads, self.support.nnz(), rng)
        } else {
            vec![None; layer.heads]
        };
        let (concat, outputs) = attend_heads(tape, &heads, &layer, &self.support, &noise, fwd, rng)?;
        let (kl, psi) = layer_prior_terms(tape, &outputs, &nets, &self.cfg.prior, layer.mode, 1)?;
        let out = if index == 0 {
            let biased = tape.add(concat, bias)?;
            tape.elu(biased)
        } else {
            let mut acc = outputs[0].out;
            for h in &outputs[1..] {
                acc = tape.add(acc, h.out)?;
            }
            let mean = tape.scale(acc, 1.0 / layer.heads as f64);
            tape.add(mean, bias)?
        };
        Ok((out, kl, outputs, psi))
    }

    fn input_dropout(&self, tape: &mut Tape, x: Var, fwd: ForwardMode, rng: &mut dyn RngCore) -> Result<Var> {
        if fwd.dropout && self.cfg.input_dropout > 0.0 {
            tape.dropout(x, self.cfg.input_dropout, rng, true)
        } else {
            Ok(x)
        }
    }
}

impl Model for GraphModel {
    type Batch = GraphBatch;

    fn init_params(&self, rng: &mut dyn RngCore) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        self.push_layer(&mut store, 0, self.features.cols(), rng)?;
        self.push_layer(&mut store, 1, self.cfg.hidden_heads * self.cfg.hidden_dim, rng)?;
        Ok(store)
    }

    fn train_batches(&self, _rng: &mut dyn RngCore) -> Result<Vec<GraphBatch>> {
        Ok(vec![self.batch_for(SplitTag::Train)?])
    }

    fn split_batch(&self, split: Split) -> Result<GraphBatch> {
        self.batch_for(match split {
            Split::Train => SplitTag::Train,
            Split::Val => SplitTag::Val,
            Split::Test => SplitTag::Test,
        })
    }

    fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &GraphBatch,
        fwd: ForwardMode,
        rng: &mut dyn RngCore,
    ) -> Result<ForwardOutput> {
        let mut cursor = Cursor::new(vars);
        let x = tape.constant((*self.features).clone());
        let x = self.input_dropout(tape, x, fwd, rng)?;
        let (h, kl1, heads1, psi1) = self.run_layer(tape, &mut cursor, 0, x, fwd, rng)?;
        let h = self.input_dropout(tape, h, fwd, rng)?;
        let (logits, kl2, heads2, psi2) = self.run_layer(tape, &mut cursor, 1, h, fwd, rng)?;
        cursor.finish()?;
        Ok(ForwardOutput {
            logits,
            rows: batch.rows.clone(),
            targets: batch.targets.clone(),
            kl_layers: kl1.into_iter().chain(kl2).collect(),
            heads: vec![heads1, heads2],
            psi: vec![psi1, psi2],
        })
    }
}
