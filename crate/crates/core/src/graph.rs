//! Attributed graphs, node splits and group partitions.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Train/validation/test node index sets.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Masks {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Masks {
    fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n {
                return Err(Error::Validation(format!("mask index {i} out of range")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Validation(format!("node {i} appears in two masks")));
            }
        }
        Ok(())
    }
}

/// An undirected attributed graph with binary labels and a categorical
/// sensitive attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    pub features: Tensor,
    /// `None` for unlabeled nodes.
    pub labels: Vec<Option<u8>>,
    pub sensitive: Vec<i64>,
    pub masks: Masks,
}

impl Graph {
    /// Validates and normalises the edge list: pairs are stored as `(i, j)`
    /// with `i < j`, sorted, and duplicates are dropped. Returns the graph
    /// and the number of dropped duplicates.
    pub fn new(
        features: Tensor,
        edges: impl IntoIterator<Item = (usize, usize)>,
        labels: Vec<Option<u8>>,
        sensitive: Vec<i64>,
    ) -> Result<(Self, usize)> {
        let n = features.rows();
        if labels.len() != n || sensitive.len() != n {
            return Err(Error::Validation(format!(
                "{n} feature rows but {} labels and {} sensitive values",
                labels.len(),
                sensitive.len()
            )));
        }
        if let Some(bad) = labels.iter().flatten().find(|&&l| l > 1) {
            return Err(Error::Validation(format!("label {bad} is not binary")));
        }
        let mut set = BTreeSet::new();
        let mut duplicates = 0;
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Validation(format!(
                    "edge ({a}, {b}) out of range for {n} nodes"
                )));
            }
            if a == b {
                return Err(Error::Validation(format!("self-loop on node {a}")));
            }
            if !set.insert((a.min(b), a.max(b))) {
                duplicates += 1;
            }
        }
        let graph = Graph {
            n,
            edges: set.into_iter().collect(),
            features,
            labels,
            sensitive,
            masks: Masks::default(),
        };
        Ok((graph, duplicates))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Unordered edges with `i < j`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn set_masks(&mut self, masks: Masks) -> Result<()> {
        masks.validate(self.n)?;
        self.masks = masks;
        Ok(())
    }

    pub fn labeled_nodes(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| self.labels[i].is_some()).collect()
    }

    /// Symmetric adjacency in compressed-row form, optionally with
    /// self-loops. Neighbours of each node are sorted.
    pub fn adjacency(&self, self_loops: bool) -> Csr {
        let mut lists = vec![Vec::new(); self.n];
        for &(a, b) in &self.edges {
            lists[a].push(b);
            lists[b].push(a);
        }
        if self_loops {
            for (i, l) in lists.iter_mut().enumerate() {
                l.push(i);
            }
        }
        Csr::from_lists(lists)
    }

    /// Copy of the graph with a different edge set.
    pub fn with_edges(&self, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<(Graph, usize)> {
        let (mut g, dup) = Graph::new(
            self.features.clone(),
            edges,
            self.labels.clone(),
            self.sensitive.clone(),
        )?;
        g.masks = self.masks.clone();
        Ok((g, dup))
    }
}

/// Compressed sparse rows: the neighbours of `i` are
/// `targets[offsets[i]..offsets[i + 1]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Csr {
    pub offsets: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Csr {
    pub fn from_lists(mut lists: Vec<Vec<usize>>) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut targets = Vec::new();
        offsets.push(0);
        for l in &mut lists {
            l.sort_unstable();
            targets.extend_from_slice(l);
            offsets.push(targets.len());
        }
        Csr { offsets, targets }
    }

    pub fn n(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.targets[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    /// Directed `(source, target)` pairs in storage order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        (0..self.n())
            .flat_map(|i| self.neighbors(i).iter().map(move |&j| (i, j)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadConfig {
    /// When set, the feature file must contain exactly this many rows.
    pub declared_nodes: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub duplicate_edges: usize,
}

/// Parses an edge list: one `i j` pair per line, 0-based, `#` starts a
/// comment.
pub fn read_edge_file(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = fs::read_to_string(path)?;
    let mut edges = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let mut fields = line.split_whitespace();
        let (Some(a), Some(b), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(parse_err(format!("expected two indices, got {line:?}")));
        };
        let a = a
            .parse::<usize>()
            .map_err(|e| parse_err(format!("{a:?}: {e}")))?;
        let b = b
            .parse::<usize>()
            .map_err(|e| parse_err(format!("{b:?}: {e}")))?;
        edges.push((a, b));
    }
    Ok(edges)
}

/// Parses the node CSV `id,label,sensitive,f0,...,f{d-1}`.
pub fn read_feature_file(path: &Path) -> Result<(Tensor, Vec<Option<u8>>, Vec<i64>)> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header = reader.headers()?.clone();
    let expected = ["id", "label", "sensitive"];
    if header.len() < 3 || header.iter().take(3).ne(expected) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "header must start with id,label,sensitive".into(),
        });
    }
    let d = header.len() - 3;
    let mut rows: BTreeMap<usize, (Vec<f64>, Option<u8>, i64)> = BTreeMap::new();
    for (k, record) in reader.records().enumerate() {
        let line = k + 2;
        let record = record?;
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        if record.len() != d + 3 {
            return Err(err(format!("{} fields, expected {}", record.len(), d + 3)));
        }
        let id: usize = record[0].parse().map_err(|e| err(format!("id: {e}")))?;
        let label = match record[1].parse::<i64>().map_err(|e| err(format!("label: {e}")))? {
            -1 => None,
            0 => Some(0),
            1 => Some(1),
            other => return Err(err(format!("label {other} not in {{-1,0,1}}"))),
        };
        let sensitive: i64 = record[2]
            .parse()
            .map_err(|e| err(format!("sensitive: {e}")))?;
        let feats = (3..d + 3)
            .map(|c| record[c].parse::<f64>().map_err(|e| err(format!("f{}: {e}", c - 3))))
            .collect::<Result<Vec<_>>>()?;
        if rows.insert(id, (feats, label, sensitive)).is_some() {
            return Err(err(format!("duplicate node id {id}")));
        }
    }
    let n = rows.len();
    if rows.keys().enumerate().any(|(i, &id)| i != id) {
        return Err(Error::Validation(format!(
            "node ids must be exactly 0..{n}"
        )));
    }
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut sensitive = Vec::with_capacity(n);
    for (_, (f, l, s)) in rows {
        data.extend(f);
        labels.push(l);
        sensitive.push(s);
    }
    Ok((Tensor::new(n, d, data)?, labels, sensitive))
}

/// Reads a graph from an edge file and a node feature CSV.
pub fn load_graph(edge_file: &Path, feature_file: &Path, config: LoadConfig) -> Result<(Graph, LoadReport)> {
    let (features, labels, sensitive) = read_feature_file(feature_file)?;
    if let Some(n) = config.declared_nodes {
        if features.rows() != n {
            return Err(Error::Validation(format!(
                "declared {n} nodes but feature file has {} rows",
                features.rows()
            )));
        }
    }
    let edges = read_edge_file(edge_file)?;
    let (graph, duplicate_edges) = Graph::new(features, edges, labels, sensitive)?;
    if duplicate_edges > 0 {
        log::warn!("dropped {duplicate_edges} duplicate edges");
    }
    Ok((graph, LoadReport { duplicate_edges }))
}

/// Writes the graph back out in the two interchange formats.
pub fn write_graph(graph: &Graph, edge_file: &Path, feature_file: &Path) -> Result<()> {
    let mut text = String::from("# i j\n");
    for &(a, b) in graph.edges() {
        text.push_str(&format!("{a} {b}\n"));
    }
    fs::write(edge_file, text)?;
    let mut w = csv::Writer::from_path(feature_file)?;
    let d = graph.features.cols();
    let mut header = vec!["id".to_string(), "label".into(), "sensitive".into()];
    header.extend((0..d).map(|c| format!("f{c}")));
    w.write_record(&header)?;
    for i in 0..graph.n() {
        let mut rec = vec![
            i.to_string(),
            graph.labels[i].map_or(-1, i64::from).to_string(),
            graph.sensitive[i].to_string(),
        ];
        rec.extend(graph.features.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMetric {
    Euclidean,
    Cosine,
}

/// Connects every pair of rows that are close enough: Euclidean distance at
/// most `threshold`, or cosine similarity at least `threshold`.
pub fn build_edges_by_threshold(x: &Tensor, threshold: f64, metric: FeatureMetric) -> Result<Vec<(usize, usize)>> {
    if !threshold.is_finite() {
        return Err(Error::Contract("threshold must be finite".into()));
    }
    let n = x.rows();
    let norms: Vec<f64> = (0..n)
        .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let keep = match metric {
                FeatureMetric::Euclidean => {
                    let d2: f64 = x
                        .row(i)
                        .iter()
                        .zip(x.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    d2.sqrt() <= threshold
                }
                FeatureMetric::Cosine => {
                    let denom = norms[i] * norms[j];
                    denom > 0.0 && dot(x.row(i), x.row(j)) / denom >= threshold
                }
            };
            if keep {
                edges.push((i, j));
            }
        }
    }
    Ok(edges)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Seeded shuffle of the labeled nodes into train/val/test masks with sizes
/// `floor(fraction * labeled)`.
pub fn split_nodes(graph: &Graph, fractions: [f64; 3], seed: u64) -> Result<Masks> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || fractions.iter().sum::<f64>() > 1.0 + 1e-12 {
        return Err(Error::Contract(format!(
            "split fractions {fractions:?} must be in [0,1] and sum to at most 1"
        )));
    }
    let mut labeled = graph.labeled_nodes();
    if labeled.is_empty() {
        return Err(Error::Validation("no labeled nodes to split".into()));
    }
    let count = labeled.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labeled.shuffle(&mut rng);
    let sizes = fractions.map(|f| (f * count).floor() as usize);
    let mut it = labeled.into_iter();
    let mut take = |k: usize| {
        let mut v: Vec<usize> = it.by_ref().take(k).collect();
        v.sort_unstable();
        v
    };
    Ok(Masks {
        train: take(sizes[0]),
        val: take(sizes[1]),
        test: take(sizes[2]),
    })
}

/// Disjoint node groups, every group non-empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPartition {
    group_of: Vec<usize>,
    m: usize,
}

impl GroupPartition {
    pub fn new(group_of: Vec<usize>) -> Result<Self> {
        let m = group_of.iter().max().map_or(0, |g| g + 1);
        let mut sizes = vec![0usize; m];
        for &g in &group_of {
            sizes[g] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Validation(format!("group {empty} is empty")));
        }
        Ok(GroupPartition { group_of, m })
    }

    pub fn num_groups(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.group_of.len()
    }

    pub fn group_of(&self, node: usize) -> usize {
        self.group_of[node]
    }

    pub fn assignments(&self) -> &[usize] {
        &self.group_of
    }

    pub fn members(&self, g: usize) -> Vec<usize> {
        (0..self.group_of.len())
            .filter(|&i| self.group_of[i] == g)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.m];
        for &g in &self.group_of {
            sizes[g] += 1;
        }
        sizes
    }

    /// Partition of the listed nodes (re-indexed `0..nodes.len()`), with
    /// groups renumbered in order of first appearance of their original id.
    /// Groups absent from `nodes` disappear.
    pub fn restrict(&self, nodes: &[usize]) -> Result<GroupPartition> {
        let mut present: Vec<usize> = nodes.iter().map(|&i| self.group_of[i]).collect();
        present.sort_unstable();
        present.dedup();
        let remap: BTreeMap<usize, usize> = present.iter().enumerate().map(|(k, &g)| (g, k)).collect();
        GroupPartition::new(nodes.iter().map(|&i| remap[&self.group_of[i]]).collect())
    }
}

/// One group per distinct sensitive value, numbered in ascending value order.
pub fn partition_by_sensitive(graph: &Graph) -> Result<GroupPartition> {
    if graph.n() == 0 {
        return Err(Error::Validation("graph has no nodes".into()));
    }
    let values: BTreeSet<i64> = graph.sensitive.iter().copied().collect();
    let index: BTreeMap<i64, usize> = values.iter().enumerate().map(|(k, &v)| (v, k)).collect();
    if values.len() < 2 {
        log::warn!("sensitive attribute has a single value; group losses are disabled");
    }
    GroupPartition::new(graph.sensitive.iter().map(|v| index[v]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::io::Write;

    fn tiny(n: usize, edges: &[(usize, usize)]) -> Graph {
        Graph::new(
            Tensor::zeros(n, 1),
            edges.iter().copied(),
            vec![Some(0); n],
            vec![0; n],
        )
        .unwrap()
        .0
    }

    #[test]
    fn triangle_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let e = dir.path().join("edges.txt");
        let f = dir.path().join("nodes.csv");
        std::fs::write(&e, "# triangle\n0 1\n1 2\n2 0 # closing edge\n").unwrap();
        let mut file = std::fs::File::create(&f).unwrap();
        writeln!(file, "id,label,sensitive,f0,f1").unwrap();
        writeln!(file, "0,1,0,0.5,1").unwrap();
        writeln!(file, "1,0,1,0.25,2").unwrap();
        writeln!(file, "2,-1,0,0,3").unwrap();
        drop(file);
        let (g, report) = load_graph(&e, &f, LoadConfig::default()).unwrap();
        assert_eq!(g.edges().len(), 3);
        assert_eq!(report.duplicate_edges, 0);
        assert_eq!(g.labels, vec![Some(1), Some(0), None]);
        assert_eq!(g.features.row(1), &[0.25, 2.0]);
    }

    #[test]
    fn duplicate_edge_dropped() {
        let (g, dup) = Graph::new(
            Tensor::zeros(3, 1),
            [(1, 2), (2, 1)],
            vec![None; 3],
            vec![0; 3],
        )
        .unwrap();
        assert_eq!(g.edges(), &[(1, 2)]);
        assert_eq!(dup, 1);
    }

    #[test]
    fn declared_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let e = dir.path().join("e.txt");
        let f = dir.path().join("n.csv");
        std::fs::write(&e, "0 1\n").unwrap();
        std::fs::write(&f, "id,label,sensitive,f0\n0,0,0,1\n1,1,1,2\n").unwrap();
        let cfg = LoadConfig {
            declared_nodes: Some(3),
        };
        assert!(matches!(load_graph(&e, &f, cfg), Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_edge_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let e = dir.path().join("e.txt");
        std::fs::write(&e, "0 1\n# ok\n1 x\n").unwrap();
        match read_edge_file(&e) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_range_edge_rejected() {
        let r = Graph::new(Tensor::zeros(2, 1), [(0, 2)], vec![None; 2], vec![0; 2]);
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn threshold_edges() {
        let x = Tensor::from_rows(&[[1.0, 2.0], [1.0, 2.0]]).unwrap();
        assert_eq!(
            build_edges_by_threshold(&x, 0.1, FeatureMetric::Euclidean).unwrap(),
            vec![(0, 1)]
        );
        let y = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(build_edges_by_threshold(&y, 0.5, FeatureMetric::Cosine)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn threshold_edges_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::random_uniform(50, 4, -1.0, 1.0, &mut rng);
        for (metric, tau) in [(FeatureMetric::Euclidean, 1.0), (FeatureMetric::Cosine, 0.6)] {
            let got = build_edges_by_threshold(&x, tau, metric).unwrap();
            let mut want = Vec::new();
            for i in 0..50 {
                for j in 0..50 {
                    if i >= j {
                        continue;
                    }
                    let (a, b) = (x.row(i), x.row(j));
                    let ok = match metric {
                        FeatureMetric::Euclidean => {
                            a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt() <= tau
                        }
                        FeatureMetric::Cosine => {
                            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                            a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>() / (na * nb) >= tau
                        }
                    };
                    if ok {
                        want.push((i, j));
                    }
                }
            }
            assert_eq!(got, want);
            assert!(!got.is_empty());
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let g = tiny(100, &[]);
        let m = split_nodes(&g, [0.5, 0.25, 0.25], 3).unwrap();
        assert_eq!((m.train.len(), m.val.len(), m.test.len()), (50, 25, 25));
        assert_eq!(m, split_nodes(&g, [0.5, 0.25, 0.25], 3).unwrap());
        m.validate(100).unwrap();
    }

    #[test]
    fn split_seeds_differ() {
        let g = tiny(100, &[]);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10 {
            let (s1, s2): (u64, u64) = (rng.gen(), rng.gen());
            let a = split_nodes(&g, [0.5, 0.25, 0.25], s1).unwrap();
            let b = split_nodes(&g, [0.5, 0.25, 0.25], s2).unwrap();
            assert_ne!(a, b);
        }
    }

    #[test]
    fn split_needs_labels() {
        let g = Graph::new(Tensor::zeros(3, 1), [], vec![None; 3], vec![0; 3]).unwrap().0;
        assert!(matches!(
            split_nodes(&g, [0.5, 0.25, 0.25], 0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn partitions() {
        let mut g = tiny(4, &[]);
        g.sensitive = vec![1, 0, 1, 1];
        let p = partition_by_sensitive(&g).unwrap();
        assert_eq!(p.num_groups(), 2);
        assert_eq!(p.assignments(), &[1, 0, 1, 1]);
        g.sensitive = vec![5, 7, 9, 5];
        let p = partition_by_sensitive(&g).unwrap();
        assert_eq!(p.num_groups(), 3);
        assert_eq!(p.sizes().iter().sum::<usize>(), 4);
        g.sensitive = vec![2; 4];
        assert_eq!(partition_by_sensitive(&g).unwrap().num_groups(), 1);
    }

    #[test]
    fn masks_must_be_disjoint() {
        let mut g = tiny(4, &[]);
        let bad = Masks {
            train: vec![0, 1],
            val: vec![1],
            test: vec![],
        };
        assert!(g.set_masks(bad).is_err());
    }
}
