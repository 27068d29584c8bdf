//! From a graph and a [`RunConfig`] to a trained, evaluated model.

use crate::error::Result;
use crate::graph::{partition_by_sensitive, split_nodes, Graph, GroupPartition};
use crate::similarity::{attr_similarity, topo_similarity, SimilaritySet};
use crate::tensor::Tensor;
use crate::trainer::{self, RunResult};

use super::cluster::kmeans_elbow;
use super::config::{Grouping, RunConfig, SimilarityMode};
use super::perturb::{perturb_noise, rewire_homophily};
use super::sbm::{sbm_generate, SbmSpec};

/// A graph with masks, its similarity set and its group partition.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub graph: Graph,
    pub similarity: SimilaritySet,
    pub partition: GroupPartition,
}

/// Features with the listed columns removed.
pub fn drop_columns(x: &Tensor, columns: &[usize]) -> Result<Tensor> {
    let keep: Vec<usize> = (0..x.cols()).filter(|c| !columns.contains(c)).collect();
    x.transpose().select_rows(&keep).map(|t| t.transpose())
}

pub fn build_similarity(graph: &Graph, cfg: &RunConfig) -> Result<SimilaritySet> {
    match cfg.similarity {
        SimilarityMode::Topo => topo_similarity(graph, cfg.train.top_k),
        SimilarityMode::Attr => attr_similarity(&graph.features, &cfg.sensitive_columns, cfg.train.top_k),
    }
}

pub fn build_partition(graph: &Graph, cfg: &RunConfig, seed: u64) -> Result<GroupPartition> {
    match cfg.grouping {
        Grouping::Sensitive => partition_by_sensitive(graph),
        Grouping::Kmeans { k_max } => {
            let x = drop_columns(&graph.features, &cfg.sensitive_columns)?;
            kmeans_elbow(&x, k_max, seed)?.partition()
        }
    }
}

/// Splits the labeled nodes with `seed`, then builds the similarity set and
/// the partition.
pub fn prepare(mut graph: Graph, cfg: &RunConfig, seed: u64) -> Result<Prepared> {
    cfg.validate()?;
    let masks = split_nodes(&graph, cfg.split, seed)?;
    graph.set_masks(masks)?;
    let similarity = build_similarity(&graph, cfg)?;
    let partition = build_partition(&graph, cfg, seed)?;
    Ok(Prepared {
        graph,
        similarity,
        partition,
    })
}

/// Trains with `cfg.train.seed` replaced by `seed`.
pub fn run_prepared(p: &Prepared, cfg: &RunConfig, seed: u64) -> Result<RunResult> {
    let mut train = cfg.train.clone();
    train.seed = seed;
    trainer::train(&p.graph, &p.similarity, &p.partition, &train)
}

/// Where the graph of each run comes from.
#[derive(Debug, Clone)]
pub enum GraphSource {
    /// A fresh benchmark graph per seed.
    Sbm(SbmSpec),
    Fixed(Graph),
}

impl GraphSource {
    pub fn graph(&self, seed: u64) -> Result<Graph> {
        match self {
            GraphSource::Sbm(spec) => sbm_generate(spec, seed),
            GraphSource::Fixed(g) => Ok(g.clone()),
        }
    }
}

/// Optional perturbations applied before preparation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Perturbation {
    pub rho: f64,
    pub sigma: f64,
}

pub fn perturb(graph: Graph, p: Perturbation, seed: u64) -> Result<Graph> {
    let mut graph = if p.rho > 0.0 {
        rewire_homophily(&graph, p.rho, seed)?.0
    } else {
        graph
    };
    if p.sigma > 0.0 {
        graph.features = perturb_noise(&graph.features, p.sigma, seed)?;
    }
    Ok(graph)
}

/// Generate or copy the graph, perturb, prepare and train.
pub fn run_once(source: &GraphSource, cfg: &RunConfig, perturbation: Perturbation, seed: u64) -> Result<RunResult> {
    let graph = perturb(source.graph(seed)?, perturbation, seed)?;
    let prepared = prepare(graph, cfg, seed)?;
    run_prepared(&prepared, cfg, seed)
}
