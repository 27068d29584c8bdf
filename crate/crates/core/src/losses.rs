//! Training objectives recorded on a [`Tape`].
//!
//! - utility: mean binary cross-entropy on the labelled training nodes
//! - individual fairness: `Tr(Z^T L Z)`, or one of the pooled surrogates
//! - group fairness: the Nash-social-welfare product over group traces,
//!   `-(G_i/G_j - 1)(G_j/G_i - 1)` averaged over ordered group pairs

use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{IndexSets, NodeId, Tape};
use crate::error::{Error, Result};
use crate::graph::GroupPartition;
use crate::similarity::SimilaritySet;

/// Added to each group trace before ratios are formed.
pub const GROUP_TRACE_GUARD: f64 = 1e-8;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_TOPK_FRACTION: f64 = 0.05;

/// Mean cross-entropy of `logits` (a column) against `(row, label)` pairs.
pub fn utility_loss(tape: &mut Tape, logits: NodeId, targets: &[(usize, u8)]) -> Result<NodeId> {
    if targets.is_empty() {
        return Err(Error::Contract("utility loss over an empty mask".into()));
    }
    let t: Vec<(usize, f64)> = targets.iter().map(|&(i, y)| (i, f64::from(y))).collect();
    tape.bce_with_logits(logits, Arc::new(t))
}

/// `Tr(Z^T L Z)`; its gradient is `2 L Z`.
pub fn individual_fairness_loss(tape: &mut Tape, z: NodeId, s: &Arc<SimilaritySet>) -> Result<NodeId> {
    tape.quadratic_form(z, s.clone())
}

/// Rows and induced similarity of every group, built once per partition.
#[derive(Debug, Clone)]
pub struct GroupContext {
    groups: Vec<(Arc<Vec<usize>>, Arc<SimilaritySet>)>,
}

impl GroupContext {
    pub fn new(s: &SimilaritySet, partition: &GroupPartition) -> Result<Self> {
        if s.n() != partition.n() {
            return Err(Error::dim(
                "group context",
                format!("similarity over {} nodes, partition over {}", s.n(), partition.n()),
            ));
        }
        let groups = (0..partition.num_groups())
            .map(|g| {
                let members = partition.members(g);
                let induced = s.induced(&members);
                (Arc::new(members), Arc::new(induced))
            })
            .collect();
        Ok(GroupContext { groups })
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Groups whose induced similarity has no pairs; their trace is always
    /// zero.
    pub fn degenerate_groups(&self) -> Vec<usize> {
        self.groups
            .iter()
            .enumerate()
            .filter(|(_, (_, s))| s.is_empty())
            .map(|(g, _)| g)
            .collect()
    }
}

/// Guarded per-group traces as `1 x 1` nodes.
pub fn group_traces(tape: &mut Tape, z: NodeId, ctx: &GroupContext) -> Result<Vec<NodeId>> {
    ctx.groups
        .iter()
        .enumerate()
        .map(|(g, (members, sim))| {
            let zg = tape.gather_rows(z, members.clone())?;
            let t = tape.quadratic_form(zg, sim.clone())?;
            if tape.value(t).item() < GROUP_TRACE_GUARD {
                log::warn!("group {g} trace is below the guard; ratios are guarded");
            }
            Ok(tape.add_scalar(t, GROUP_TRACE_GUARD))
        })
        .collect()
}

/// Nash-social-welfare group loss. Zero iff all group traces are equal.
pub fn group_fairness_loss(tape: &mut Tape, z: NodeId, ctx: &GroupContext) -> Result<NodeId> {
    let m = ctx.num_groups();
    if m < 2 {
        return Err(Error::Contract(format!("group loss needs 2 groups, got {m}")));
    }
    let traces = group_traces(tape, z, ctx)?;
    let mut terms = Vec::with_capacity(m * (m - 1));
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let r = tape.div(traces[i], traces[j])?;
            let r_inv = tape.div(traces[j], traces[i])?;
            let a = tape.add_scalar(r, -1.0);
            let b = tape.add_scalar(r_inv, -1.0);
            let prod = tape.hadamard(a, b)?;
            terms.push(tape.scale(prod, -1.0));
        }
    }
    let stacked = tape.concat_rows(&terms)?;
    Ok(tape.mean_all(stacked))
}

/// Pooled replacement for the trace term, over pairwise distances
/// `|z_i - z_j|_2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Surrogate {
    /// `sum_p w_p d_p` with `w = softmax(d / temperature)`.
    Softmax { temperature: f64 },
    /// Mean of the largest `ceil(fraction * M)` distances.
    TopK { fraction: f64 },
}

impl Surrogate {
    pub fn softmax() -> Self {
        Surrogate::Softmax { temperature: DEFAULT_TEMPERATURE }
    }

    pub fn top_k() -> Self {
        Surrogate::TopK { fraction: DEFAULT_TOPK_FRACTION }
    }
}

/// Parses `none`, `softmax` or `topk` with default parameters.
pub fn parse_surrogate(s: &str) -> Result<Option<Surrogate>> {
    match s {
        "none" => Ok(None),
        "softmax" => Ok(Some(Surrogate::softmax())),
        "topk" => Ok(Some(Surrogate::top_k())),
        other => Err(Error::Config(format!("unknown surrogate '{other}'"))),
    }
}

impl FromStr for Surrogate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_surrogate(s)?.ok_or_else(|| Error::Config("'none' is not a surrogate".into()))
    }
}

pub fn surrogate_if_loss(
    tape: &mut Tape,
    z: NodeId,
    pairs: &Arc<Vec<(usize, usize)>>,
    mode: Surrogate,
) -> Result<NodeId> {
    if pairs.is_empty() {
        return Err(Error::Contract("surrogate loss over an empty pair set".into()));
    }
    let d = tape.pair_distances(z, pairs.clone())?;
    match mode {
        Surrogate::Softmax { temperature } => {
            if !(temperature > 0.0) {
                return Err(Error::Contract(format!("temperature {temperature} must be positive")));
            }
            let logits = tape.scale(d, 1.0 / temperature);
            let w = tape.softmax(logits, Arc::new(IndexSets::contiguous(&[0, pairs.len()])))?;
            let wd = tape.hadamard(w, d)?;
            Ok(tape.sum_all(wd))
        }
        Surrogate::TopK { fraction } => {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::Contract(format!("top-k fraction {fraction} must be in (0, 1]")));
            }
            let k = ((fraction * pairs.len() as f64).ceil() as usize).clamp(1, pairs.len());
            tape.top_k_mean(d, k)
        }
    }
}

/// The three loss terms of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossBundle {
    pub utility: NodeId,
    pub individual: NodeId,
    pub group: NodeId,
}

impl LossBundle {
    pub fn terms(&self) -> [NodeId; 3] {
        [self.utility, self.individual, self.group]
    }
}

/// `sum_i beta_i L_i` with each `beta_i` a constant.
pub fn total_loss(tape: &mut Tape, bundle: &LossBundle, beta: [f64; 3]) -> Result<NodeId> {
    if beta.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
        return Err(Error::Contract(format!("loss weights {beta:?} must be non-negative")));
    }
    let t = bundle.terms();
    let a = tape.scale(t[0], beta[0]);
    let b = tape.scale(t[1], beta[1]);
    let c = tape.scale(t[2], beta[2]);
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}
