//! Sparse symmetric similarity weights and the Laplacian operations built on
//! them.
//!
//! A [`SimilaritySet`] stores each unordered pair once as `(i, j, w)` with
//! `i < j` and `0 < w <= 1`. The diagonal is never stored. The Laplacian
//! `L = D - S` is only ever applied, never materialised.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{dot, Graph};
use crate::tensor::Tensor;

/// Default `delta` in `d(i, j) = 1 / (S[i, j] + delta)`.
pub const DEFAULT_DELTA: f64 = 1e-6;

/// Default number of neighbours kept per node when sparsifying.
pub const DEFAULT_TOP_K: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct SimilaritySet {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
    degree: Vec<f64>,
}

impl SimilaritySet {
    /// Builds a set from possibly unordered, possibly repeated pairs.
    /// Repeated pairs keep the larger weight.
    pub fn from_entries(n: usize, entries: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut map: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (i, j, w) in entries {
            if i >= n || j >= n {
                return Err(Error::Validation(format!(
                    "similarity pair ({i}, {j}) out of range for {n} nodes"
                )));
            }
            if i == j {
                return Err(Error::Validation(format!("diagonal similarity entry at {i}")));
            }
            if !(w > 0.0 && w <= 1.0) {
                return Err(Error::Validation(format!(
                    "similarity weight {w} for ({i}, {j}) outside (0, 1]"
                )));
            }
            let slot = map.entry((i.min(j), i.max(j))).or_insert(w);
            *slot = slot.max(w);
        }
        let entries: Vec<_> = map.into_iter().map(|((i, j), w)| (i, j, w)).collect();
        let mut degree = vec![0.0; n];
        for &(i, j, w) in &entries {
            degree[i] += w;
            degree[j] += w;
        }
        Ok(SimilaritySet { n, entries, degree })
    }

    pub fn empty(n: usize) -> Self {
        SimilaritySet {
            n,
            entries: Vec::new(),
            degree: vec![0.0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Stored pairs, `i < j`, sorted.
    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `D[i, i] = sum_{j != i} S[i, j]`.
    pub fn degree(&self) -> &[f64] {
        &self.degree
    }

    /// `S[i, j]`, zero when the pair is not stored or `i == j`.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let key = (i.min(j), i.max(j));
        self.entries
            .binary_search_by(|&(a, b, _)| (a, b).cmp(&key))
            .map_or(0.0, |k| self.entries[k].2)
    }

    /// Stored pairs without weights.
    pub fn support_pairs(&self) -> Vec<(usize, usize)> {
        self.entries.iter().map(|&(i, j, _)| (i, j)).collect()
    }

    /// Keeps only pairs with both endpoints accepted by `keep`; node indices
    /// are unchanged.
    pub fn restrict(&self, keep: impl Fn(usize) -> bool) -> SimilaritySet {
        let entries: Vec<_> = self
            .entries
            .iter()
            .copied()
            .filter(|&(i, j, _)| keep(i) && keep(j))
            .collect();
        let mut degree = vec![0.0; self.n];
        for &(i, j, w) in &entries {
            degree[i] += w;
            degree[j] += w;
        }
        SimilaritySet {
            n: self.n,
            entries,
            degree,
        }
    }

    /// The similarity induced on `nodes`, re-indexed so that `nodes[k]`
    /// becomes `k`.
    pub fn induced(&self, nodes: &[usize]) -> SimilaritySet {
        let mut index = vec![usize::MAX; self.n];
        for (k, &v) in nodes.iter().enumerate() {
            index[v] = k;
        }
        let mut entries: Vec<_> = self
            .entries
            .iter()
            .filter(|&&(i, j, _)| index[i] != usize::MAX && index[j] != usize::MAX)
            .map(|&(i, j, w)| {
                let (a, b) = (index[i], index[j]);
                (a.min(b), a.max(b), w)
            })
            .collect();
        entries.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
        let mut degree = vec![0.0; nodes.len()];
        for &(i, j, w) in &entries {
            degree[i] += w;
            degree[j] += w;
        }
        SimilaritySet {
            n: nodes.len(),
            entries,
            degree,
        }
    }

    /// Recomputes the degree vector from the entries and reports the largest
    /// absolute deviation from the stored one.
    pub fn degree_drift(&self) -> f64 {
        let mut fresh = vec![0.0; self.n];
        for &(i, j, w) in &self.entries {
            fresh[i] += w;
            fresh[j] += w;
        }
        fresh
            .iter()
            .zip(&self.degree)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Writes `i,j,weight` rows with `i < j`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["i", "j", "weight"])?;
        for &(i, j, wt) in &self.entries {
            w.write_record(&[i.to_string(), j.to_string(), wt.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, n: usize) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut entries = Vec::new();
        for (k, rec) in r.records().enumerate() {
            let rec = rec?;
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: k + 2,
                msg,
            };
            if rec.len() != 3 {
                return Err(err(format!("expected 3 fields, got {}", rec.len())));
            }
            let i: usize = rec[0].trim().parse().map_err(|e| err(format!("i: {e}")))?;
            let j: usize = rec[1].trim().parse().map_err(|e| err(format!("j: {e}")))?;
            let w: f64 = rec[2].trim().parse().map_err(|e| err(format!("weight: {e}")))?;
            entries.push((i, j, w));
        }
        SimilaritySet::from_entries(n, entries)
    }
}

/// Keeps, for every node, its `top_k` largest positive similarities and
/// symmetrises by union (weights are symmetric already).
fn sparsify(n: usize, rows: Vec<Vec<(usize, f64)>>, top_k: usize) -> Result<SimilaritySet> {
    let mut kept = Vec::new();
    for (i, mut row) in rows.into_iter().enumerate() {
        row.retain(|&(j, w)| j != i && w > 0.0);
        row.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        row.truncate(top_k);
        kept.extend(row.into_iter().map(|(j, w)| (i, j, w.min(1.0))));
    }
    SimilaritySet::from_entries(n, kept)
}

/// Cosine similarity between adjacency rows, sparsified to `top_k` per node.
///
/// Only pairs that share a neighbour have positive cosine, so the
/// computation walks two-hop paths instead of all pairs.
pub fn topo_similarity(graph: &Graph, top_k: usize) -> Result<SimilaritySet> {
    if top_k == 0 {
        return Err(Error::Contract("top_k must be at least 1".into()));
    }
    if graph.edges().is_empty() {
        return Err(Error::Contract("topological similarity needs at least one edge".into()));
    }
    let adj = graph.adjacency(false);
    let n = graph.n();
    let mut counts = vec![0usize; n];
    let mut touched = Vec::new();
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        for &u in adj.neighbors(i) {
            for &j in adj.neighbors(u) {
                if counts[j] == 0 {
                    touched.push(j);
                }
                counts[j] += 1;
            }
        }
        let di = adj.degree(i) as f64;
        let mut row = Vec::with_capacity(touched.len());
        for &j in &touched {
            let cos = counts[j] as f64 / (di * adj.degree(j) as f64).sqrt();
            row.push((j, cos));
            counts[j] = 0;
        }
        touched.clear();
        rows.push(row);
    }
    sparsify(n, rows, top_k)
}

/// Cosine similarity between feature rows after dropping the sensitive
/// columns, sparsified to `top_k` per node. Negative cosines and all-zero
/// rows contribute nothing.
pub fn attr_similarity(x: &Tensor, sensitive_columns: &[usize], top_k: usize) -> Result<SimilaritySet> {
    if top_k == 0 {
        return Err(Error::Contract("top_k must be at least 1".into()));
    }
    if let Some(&c) = sensitive_columns.iter().find(|&&c| c >= x.cols()) {
        return Err(Error::dim(
            "attr_similarity",
            format!("sensitive column {c} but only {} feature columns", x.cols()),
        ));
    }
    let keep: Vec<usize> = (0..x.cols()).filter(|c| !sensitive_columns.contains(c)).collect();
    let n = x.rows();
    let masked: Vec<Vec<f64>> = (0..n)
        .map(|i| keep.iter().map(|&c| x.get(i, c)).collect())
        .collect();
    let norms: Vec<f64> = masked.iter().map(|r| dot(r, r).sqrt()).collect();
    let mut rows = vec![Vec::new(); n];
    for i in 0..n {
        if norms[i] == 0.0 {
            continue;
        }
        for j in i + 1..n {
            if norms[j] == 0.0 {
                continue;
            }
            let cos = dot(&masked[i], &masked[j]) / (norms[i] * norms[j]);
            if cos > 0.0 {
                rows[i].push((j, cos));
                rows[j].push((i, cos));
            }
        }
    }
    sparsify(n, rows, top_k)
}

/// `L Z` with `L = D - S`, computed sparsely.
pub fn laplacian_apply(s: &SimilaritySet, z: &Tensor) -> Result<Tensor> {
    if z.rows() != s.n() {
        return Err(Error::dim(
            "laplacian_apply",
            format!("{} rows for {} nodes", z.rows(), s.n()),
        ));
    }
    let c = z.cols();
    let mut out = Tensor::zeros(z.rows(), c);
    for i in 0..s.n() {
        let d = s.degree[i];
        for (o, &v) in out.row_mut(i).iter_mut().zip(z.row(i)) {
            *o = d * v;
        }
    }
    for &(i, j, w) in &s.entries {
        for k in 0..c {
            let (zi, zj) = (z.get(i, k), z.get(j, k));
            out.data_mut()[i * c + k] -= w * zj;
            out.data_mut()[j * c + k] -= w * zi;
        }
    }
    Ok(out)
}

/// `Tr(Z^T L Z) = 1/2 sum_i sum_j S[i,j] |z_i - z_j|^2`.
pub fn quadratic_form(s: &SimilaritySet, z: &Tensor) -> Result<f64> {
    if z.rows() != s.n() {
        return Err(Error::dim(
            "quadratic-laplacian-form",
            format!("{} rows for {} nodes", z.rows(), s.n()),
        ));
    }
    Ok(s.entries
        .iter()
        .map(|&(i, j, w)| {
            let d2: f64 = z.row(i).iter().zip(z.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            w * d2
        })
        .sum())
}

/// `d(i, j) = 1 / (S[i, j] + delta)`; absent pairs use weight zero.
pub fn distance(s: &SimilaritySet, i: usize, j: usize, delta: f64) -> f64 {
    1.0 / (s.weight(i, j) + delta)
}
