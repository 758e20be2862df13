//! Stacked cross-attention classifier.
//!
//! Each instance has `m` query rows and `n` key rows. Layer 0 reads the
//! queries; layer `l+1` reads the concatenated head outputs of layer `l`.
//! Keys and values always come from the instance's key rows. A linear head
//! maps every final query row to class logits.

use std::sync::Arc;

use rand::RngCore;

use crate::attention::{
    draw_layer_noise, multi_head_layer, AdditiveParams, AttentionConfig, ForwardMode, HeadParams, ScoreFn, Support,
};
use crate::autodiff::{Mask, Pattern, Tape, Tensor, Var};
use crate::error::{BamError, Result};
use crate::objective::ForwardOutput;
use crate::params::{ParamGroup, ParamStore};
use crate::prior::PriorConfig;

use super::{layer_prior_terms, push_prior_nets, read_prior_nets, Cursor};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub d_query: usize,
    pub d_key: usize,
    pub classes: usize,
    pub layers: Vec<AttentionConfig>,
    pub prior: PriorConfig,
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_query == 0 || self.d_key == 0 || self.classes == 0 || self.layers.is_empty() {
            return Err(BamError::Config(
                "classifier needs positive widths, classes and at least one layer".into(),
            ));
        }
        self.prior.validate()?;
        for layer in &self.layers {
            layer.validate()?;
            self.prior.check_pairing(layer.mode)?;
        }
        Ok(())
    }

    /// Feature width entering layer `l`.
    fn input_width(&self, l: usize) -> usize {
        if l == 0 {
            self.d_query
        } else {
            self.layers[l - 1].heads * self.layers[l - 1].d_v
        }
    }
}

/// A batch of instances laid out row-wise, instance by instance.
#[derive(Clone, Debug)]
pub struct SeqBatch {
    /// `(B·m)×d_query`.
    pub queries: Tensor,
    /// `(B·n)×d_key`.
    pub keys: Tensor,
    pub rows: Arc<Vec<usize>>,
    pub targets: Arc<Vec<usize>>,
    pub instances: usize,
    pub support: Support,
}

impl SeqBatch {
    /// Every query row carries a label. Queries attend only to keys of
    /// their own instance; `dense` selects the masked dense layout.
    pub fn new(queries: Tensor, keys: Tensor, labels: Vec<usize>, instances: usize, dense: bool) -> Result<Self> {
        let (mq, nk) = (queries.rows(), keys.rows());
        if instances == 0 || mq % instances != 0 || nk % instances != 0 || labels.len() != mq {
            return Err(BamError::Dimension(format!(
                "{mq} query rows, {nk} key rows and {} labels cannot form {instances} instances",
                labels.len()
            )));
        }
        let (m, n) = (mq / instances, nk / instances);
        let support = if dense {
            let mask = if instances == 1 {
                None
            } else {
                let allowed = (0..mq).flat_map(|i| (0..nk).map(move |j| i / m == j / n)).collect();
                Some(Mask::new(mq, nk, allowed)?)
            };
            Support::dense(mq, nk, mask)?
        } else {
            let entries = (0..mq).flat_map(|i| (0..n).map(move |j| (i, (i / m) * n + j)));
            Support::sparse(Arc::new(Pattern::from_entries(mq, nk, entries)?))?
        };
        Ok(SeqBatch {
            queries,
            keys,
            rows: Arc::new((0..mq).collect()),
            targets: Arc::new(labels),
            instances,
            support,
        })
    }
}

#[derive(Clone, Debug)]
pub struct AttentionClassifier {
    pub cfg: ClassifierConfig,
}

impl AttentionClassifier {
    pub fn new(cfg: ClassifierConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(AttentionClassifier { cfg })
    }

    pub fn init_params(&self, rng: &mut dyn RngCore) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (l, layer) in self.cfg.layers.iter().enumerate() {
            let d_in = self.cfg.input_width(l);
            for h in 0..layer.heads {
                let p = format!("layer{l}.head{h}");
                store.push(format!("{p}.m_q"), ParamGroup::Weight, Tensor::glorot(d_in, layer.d_k, rng)?)?;
                store.push(format!("{p}.m_k"), ParamGroup::Weight, Tensor::glorot(self.cfg.d_key, layer.d_k, rng)?)?;
                store.push(format!("{p}.m_v"), ParamGroup::Weight, Tensor::glorot(self.cfg.d_key, layer.d_v, rng)?)?;
                if matches!(layer.score_fn, ScoreFn::AdditiveLeakyRelu { .. }) {
                    store.push(format!("{p}.a_q"), ParamGroup::Weight, Tensor::glorot(layer.d_k, 1, rng)?)?;
                    store.push(format!("{p}.a_k"), ParamGroup::Weight, Tensor::glorot(layer.d_k, 1, rng)?)?;
                }
            }
            push_prior_nets(&mut store, &format!("layer{l}"), &self.cfg.prior, layer.mode, layer.heads, layer.d_k, rng)?;
        }
        let last = self.cfg.layers.last().expect("validated");
        let width = last.heads * last.d_v;
        store.push("out.w", ParamGroup::Weight, Tensor::glorot(width, self.cfg.classes, rng)?)?;
        store.push("out.b", ParamGroup::Bias, Tensor::zeros(vec![1, self.cfg.classes])?)?;
        Ok(store)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &SeqBatch,
        fwd: ForwardMode,
        rng: &mut dyn RngCore,
    ) -> Result<ForwardOutput> {
        let mut cursor = Cursor::new(vars);
        let mut x = tape.constant(batch.queries.clone());
        let ctx = tape.constant(batch.keys.clone());
        let mut kl_layers = Vec::new();
        let mut all_heads = Vec::with_capacity(self.cfg.layers.len());
        let mut all_psi = Vec::with_capacity(self.cfg.layers.len());
        for layer in &self.cfg.layers {
            let mut heads = Vec::with_capacity(layer.heads);
            for _ in 0..layer.heads {
                let (m_q, m_k, m_v) = (cursor.next()?, cursor.next()?, cursor.next()?);
                let additive = match layer.score_fn {
                    ScoreFn::AdditiveLeakyRelu { .. } => Some(AdditiveParams {
                        a_q: cursor.next()?,
                        a_k: cursor.next()?,
                    }),
                    ScoreFn::ScaledDotProduct => None,
                };
                heads.push(HeadParams { m_q, m_k, m_v, additive });
            }
            let nets = read_prior_nets(&mut cursor, &self.cfg.prior, layer.mode, layer.heads)?;
            let noise = if fwd.sample {
                draw_layer_noise(layer.mode, layer.heads, batch.support.nnz(), rng)
            } else {
                vec![None; layer.heads]
            };
            let (out, outputs) = multi_head_layer(tape, x, ctx, &heads, layer, &batch.support, &noise, fwd, rng)?;
            let (kl, psi) = layer_prior_terms(
                tape,
                &outputs,
                &nets,
                &self.cfg.prior,
                layer.mode,
                batch.instances,
            )?;
            kl_layers.extend(kl);
            all_heads.push(outputs);
            all_psi.push(psi);
            x = out;
        }
        let w = cursor.next()?;
        let b = cursor.next()?;
        cursor.finish()?;
        let logits = tape.matmul(x, w)?;
        let logits = tape.add(logits, b)?;
        Ok(ForwardOutput {
            logits,
            rows: batch.rows.clone(),
            targets: batch.targets.clone(),
            kl_layers,
            heads: all_heads,
            psi: all_psi,
        })
    }
}
