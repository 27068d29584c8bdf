//! Stochastic block model benchmark graphs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

/// Two blocks that double as the label classes, and a binary sensitive
/// attribute assigned independently of the blocks.
///
/// Node features are `label_signal * (2y - 1) * u + group_signal * (2s - 1) * v + noise * eps`
/// for fixed random directions `u`, `v` and standard normal `eps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SbmSpec {
    pub block_sizes: Vec<usize>,
    pub p_within: f64,
    pub p_between: f64,
    pub feature_dim: usize,
    pub label_signal: f64,
    pub group_signal: f64,
    pub noise: f64,
    /// Fraction of nodes with sensitive value 0.
    pub sensitive_ratio: f64,
    /// Prepend the sensitive value as feature column 0.
    pub include_sensitive: bool,
}

impl Default for SbmSpec {
    fn default() -> Self {
        SbmSpec {
            block_sizes: vec![500, 500],
            p_within: 0.02,
            p_between: 0.005,
            feature_dim: 8,
            label_signal: 0.2,
            group_signal: 1.0,
            noise: 1.0,
            sensitive_ratio: 0.78,
            include_sensitive: true,
        }
    }
}

impl SbmSpec {
    pub fn n(&self) -> usize {
        self.block_sizes.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_sizes.len() != 2 || self.block_sizes.contains(&0) {
            return Err(Error::Config("the benchmark needs two non-empty blocks".into()));
        }
        for (name, p) in [
            ("p_within", self.p_within),
            ("p_between", self.p_between),
            ("sensitive_ratio", self.sensitive_ratio),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} must lie in [0, 1]")));
            }
        }
        if self.feature_dim == 0 && !self.include_sensitive {
            return Err(Error::Config("graph would have no features".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        Ok(())
    }

    /// Expected number of edges.
    pub fn expected_edges(&self) -> f64 {
        let (a, b) = (self.block_sizes[0] as f64, self.block_sizes[1] as f64);
        self.p_within * (a * (a - 1.0) / 2.0 + b * (b - 1.0) / 2.0) + self.p_between * a * b
    }
}

pub fn sbm_generate(spec: &SbmSpec, seed: u64) -> Result<Graph> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.n();
    let block: Vec<usize> = spec
        .block_sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &size)| std::iter::repeat(b).take(size))
        .collect();

    let majority = (spec.sensitive_ratio * n as f64).round() as usize;
    let mut sensitive: Vec<i64> = (0..n).map(|i| i64::from(i >= majority)).collect();
    sensitive.shuffle(&mut rng);

    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if block[i] == block[j] { spec.p_within } else { spec.p_between };
            if rng.gen::<f64>() < p {
                edges.push((i, j));
            }
        }
    }

    let d = spec.feature_dim;
    let direction = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        v.into_iter().map(|x| x * (d as f64).sqrt() / norm).collect()
    };
    let u = direction(&mut rng);
    let v = direction(&mut rng);
    let offset = usize::from(spec.include_sensitive);
    let mut x = Tensor::zeros(n, d + offset);
    for i in 0..n {
        let y = 2.0 * block[i] as f64 - 1.0;
        let s = 2.0 * sensitive[i] as f64 - 1.0;
        let row = x.row_mut(i);
        if spec.include_sensitive {
            row[0] = sensitive[i] as f64;
        }
        for k in 0..d {
            let eps: f64 = StandardNormal.sample(&mut rng);
            row[offset + k] = spec.label_signal * y * u[k] + spec.group_signal * s * v[k] + spec.noise * eps;
        }
    }
    let labels = block.iter().map(|&b| Some(b as u8)).collect();
    Ok(Graph::new(x, edges, labels, sensitive)?.0)
}
