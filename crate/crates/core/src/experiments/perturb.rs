//! Controlled perturbations of a graph: homophily rewiring and feature noise.

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

pub const REWIRE_RETRIES: usize = 20;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewireReport {
    pub selected: usize,
    pub rewired: usize,
    /// The kept endpoint has no other node with its label.
    pub no_candidate: usize,
    /// Every retry produced a self-loop or an existing edge.
    pub exhausted: usize,
}

/// Fraction of edges with both endpoints labeled that join equal labels.
pub fn same_label_fraction(graph: &Graph) -> f64 {
    let (mut same, mut total) = (0usize, 0usize);
    for &(a, b) in graph.edges() {
        if let (Some(x), Some(y)) = (graph.labels[a], graph.labels[b]) {
            total += 1;
            same += usize::from(x == y);
        }
    }
    if total == 0 {
        0.0
    } else {
        same as f64 / total as f64
    }
}

/// Picks `floor(rho * |E|)` edges uniformly. For each one, an endpoint
/// chosen uniformly at random is replaced by a random node that shares the
/// label of the endpoint that stays. Self-loops and duplicates are retried
/// up to [`REWIRE_RETRIES`] times before the edge is left alone.
pub fn rewire_homophily(graph: &Graph, rho: f64, seed: u64) -> Result<(Graph, RewireReport)> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Contract(format!("rho = {rho} must lie in [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = graph.edges().len();
    let count = (rho * m as f64).floor() as usize;
    let mut report = RewireReport {
        selected: count,
        ..Default::default()
    };
    let mut by_label: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, l) in graph.labels.iter().enumerate() {
        if let Some(l) = l {
            by_label[*l as usize].push(i);
        }
    }
    let mut edges = graph.edges().to_vec();
    let mut present: BTreeSet<(usize, usize)> = edges.iter().copied().collect();
    let mut picks = index::sample(&mut rng, m, count).into_vec();
    picks.sort_unstable();
    for e in picks {
        let (a, b) = edges[e];
        let keep = if rng.gen::<bool>() { a } else { b };
        let pool = match graph.labels[keep] {
            Some(l) => &by_label[l as usize],
            None => {
                report.no_candidate += 1;
                continue;
            }
        };
        if pool.iter().all(|&c| c == keep) {
            report.no_candidate += 1;
            continue;
        }
        let replacement = (0..REWIRE_RETRIES).find_map(|_| {
            let c = *pool.choose(&mut rng)?;
            let pair = (keep.min(c), keep.max(c));
            (c != keep && !present.contains(&pair)).then_some(pair)
        });
        match replacement {
            Some(pair) => {
                present.remove(&edges[e]);
                present.insert(pair);
                edges[e] = pair;
                report.rewired += 1;
            }
            None => report.exhausted += 1,
        }
    }
    let (out, _) = graph.with_edges(edges)?;
    Ok((out, report))
}

/// `X + eta` with `eta ~ N(0, sigma^2)` elementwise.
pub fn perturb_noise(x: &Tensor, sigma: f64, seed: u64) -> Result<Tensor> {
    let err = || Error::Contract(format!("noise sigma = {sigma} must be finite and non-negative"));
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(err());
    }
    let normal = Normal::new(0.0, sigma).map_err(|_| err())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = x.clone();
    for v in out.data_mut() {
        *v += normal.sample(&mut rng);
    }
    Ok(out)
}
