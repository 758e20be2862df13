//! Models built from attention layers: a sequence classifier for synthetic
//! tasks and a graph attention network for node classification.

pub mod classifier;
pub mod gat;
pub mod synthetic;

use rand::RngCore;

use crate::attention::{AttentionMode, HeadOutput};
use crate::autodiff::{Tape, Var};
use crate::error::{BamError, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::prior::{contextual_psi, layer_kl, prior_params, ContextualPriorNet, PriorConfig, PriorKind, PriorNetVars};

pub use classifier::{AttentionClassifier, ClassifierConfig, SeqBatch};
pub use gat::{GatConfig, GraphBatch, GraphModel};
pub use synthetic::{generate_synthetic, SyntheticModel, SyntheticParams, SyntheticSplit, SyntheticTask};

/// Walks bound parameters in the order a model pushed them.
pub(crate) struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(vars: &'a [Var]) -> Self {
        Cursor { vars, pos: 0 }
    }

    pub(crate) fn next(&mut self) -> Result<Var> {
        let v = self
            .vars
            .get(self.pos)
            .copied()
            .ok_or_else(|| BamError::Parameter(format!("model expects more than {} parameters", self.vars.len())))?;
        self.pos += 1;
        Ok(v)
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.pos != self.vars.len() {
            return Err(BamError::Parameter(format!(
                "model used {} of {} parameters",
                self.pos,
                self.vars.len()
            )));
        }
        Ok(())
    }
}

/// Whether a layer carries contextual prior networks.
pub(crate) fn has_prior_net(prior: &PriorConfig, mode: AttentionMode) -> bool {
    prior.kind == PriorKind::Contextual && prior.has_kl(mode)
}

/// Number of prior networks in a layer of `heads` heads.
pub(crate) fn prior_net_count(prior: &PriorConfig, mode: AttentionMode, heads: usize) -> usize {
    match (has_prior_net(prior, mode), prior.share_heads) {
        (false, _) => 0,
        (true, true) => 1,
        (true, false) => heads,
    }
}

pub(crate) fn push_prior_nets(
    store: &mut ParamStore,
    layer: &str,
    prior: &PriorConfig,
    mode: AttentionMode,
    heads: usize,
    d_k: usize,
    rng: &mut dyn RngCore,
) -> Result<()> {
    let count = prior_net_count(prior, mode, heads);
    for h in 0..count {
        let prefix = if prior.share_heads {
            format!("{layer}.prior")
        } else {
            format!("{layer}.head{h}.prior")
        };
        let net = ContextualPriorNet::init(d_k, prior.d_mid, rng)?;
        store.push(format!("{prefix}.f1_w"), ParamGroup::Prior, net.f1_w)?;
        store.push(format!("{prefix}.f1_b"), ParamGroup::Prior, net.f1_b)?;
        store.push(format!("{prefix}.f2_w"), ParamGroup::Prior, net.f2_w)?;
        store.push(format!("{prefix}.f2_b"), ParamGroup::Prior, net.f2_b)?;
    }
    Ok(())
}

/// Prior networks of a layer, one entry per head.
pub(crate) fn read_prior_nets(
    cursor: &mut Cursor<'_>,
    prior: &PriorConfig,
    mode: AttentionMode,
    heads: usize,
) -> Result<Vec<Option<PriorNetVars>>> {
    let count = prior_net_count(prior, mode, heads);
    let mut nets = Vec::with_capacity(count);
    for _ in 0..count {
        nets.push(PriorNetVars {
            f1_w: cursor.next()?,
            f1_b: cursor.next()?,
            f2_w: cursor.next()?,
            f2_b: cursor.next()?,
        });
    }
    Ok(match count {
        0 => vec![None; heads],
        1 if heads > 1 => vec![Some(nets[0]); heads],
        _ => nets.into_iter().map(Some).collect(),
    })
}

/// `Ψ` for every head of a layer and, when the layer was sampled, its KL
/// averaged over heads and attention entries.
pub(crate) fn layer_prior_terms(
    tape: &mut Tape,
    heads: &[HeadOutput],
    nets: &[Option<PriorNetVars>],
    prior: &PriorConfig,
    mode: AttentionMode,
    segments: usize,
) -> Result<(Option<Var>, Vec<Option<Var>>)> {
    let mut psis = Vec::with_capacity(heads.len());
    let mut kl: Option<Var> = None;
    for (head, net) in heads.iter().zip(nets) {
        let psi = match net {
            Some(net) => Some(contextual_psi(tape, head.k, net, segments)?),
            None => None,
        };
        psis.push(psi);
        if prior.has_kl(mode) && head.sample.eps.is_some() {
            let pp = prior_params(tape, psi, prior, &head.sample.pattern)?;
            let term = layer_kl(tape, &head.sample, &pp)?;
            kl = Some(match kl {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
    }
    let entries = heads.iter().map(|h| h.sample.pattern.nnz()).sum::<usize>() as f64;
    let kl = kl.map(|k| tape.scale(k, 1.0 / entries));
    Ok((kl, psis))
}
