//! Fairness and utility metrics.
//!
//! Individual fairness is measured two ways: the Laplacian trace
//! `Tr(Z^T L Z)` and the similarity-weighted Gini coefficient
//!
//! ```text
//! Gini = sum_i sum_j S[i,j] |z_i - z_j|_1 / (2 n sum_i |z_i|_1)
//! ```
//!
//! where both sums run over all ordered pairs. Group disparity compares a
//! per-group value (trace or Gini on the group's induced similarity) across
//! groups through `max(a/b, b/a)`. Equal opportunity, AUC and F1 cover the
//! prediction side.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GroupPartition;
use crate::similarity::{quadratic_form, SimilaritySet};
use crate::tensor::Tensor;

/// Values below this are raised to it before forming ratios.
pub const RATIO_FLOOR: f64 = 1e-12;

/// Default decision threshold on sigmoid scores.
pub const DEFAULT_EO_THRESHOLD: f64 = 0.5;

fn check_rows(op: &'static str, z: &Tensor, s: &SimilaritySet) -> Result<()> {
    if z.rows() != s.n() {
        return Err(Error::dim(op, format!("{} embedding rows for {} nodes", z.rows(), s.n())));
    }
    Ok(())
}

fn l1_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Which pairs the Lipschitz maximum ranges over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairScope {
    /// Pairs with a stored similarity.
    #[default]
    Stored,
    /// Every pair of distinct nodes; absent pairs have distance `1/delta`.
    All,
}

/// Largest `|z_i - z_j|_1 / d(i, j)` with `d(i, j) = 1 / (S[i,j] + delta)`.
pub fn lipschitz_constant(z: &Tensor, s: &SimilaritySet, delta: f64, scope: PairScope) -> Result<f64> {
    check_rows("lipschitz_constant", z, s)?;
    if delta < 0.0 {
        return Err(Error::Contract(format!("delta {delta} must be non-negative")));
    }
    match scope {
        PairScope::Stored => {
            if s.is_empty() {
                return Err(Error::UndefinedMetric("Lipschitz constant with no stored pairs".into()));
            }
            Ok(s.entries()
                .iter()
                .map(|&(i, j, w)| l1_diff(z.row(i), z.row(j)) * (w + delta))
                .fold(0.0, f64::max))
        }
        PairScope::All => {
            let n = z.rows();
            if n < 2 {
                return Err(Error::UndefinedMetric("Lipschitz constant needs two nodes".into()));
            }
            let mut best: f64 = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    best = best.max(l1_diff(z.row(i), z.row(j)) * (s.weight(i, j) + delta));
                }
            }
            Ok(best)
        }
    }
}

/// `sum_i sum_j S[i,j] |z_i - z_j|_1` over ordered pairs.
pub fn gini_numerator(z: &Tensor, s: &SimilaritySet) -> Result<f64> {
    check_rows("gini_numerator", z, s)?;
    Ok(2.0
        * s.entries()
            .iter()
            .map(|&(i, j, w)| w * l1_diff(z.row(i), z.row(j)))
            .sum::<f64>())
}

/// Similarity-weighted Gini coefficient of the embeddings.
pub fn weighted_gini(z: &Tensor, s: &SimilaritySet) -> Result<f64> {
    let num = gini_numerator(z, s)?;
    let mass: f64 = z.data().iter().map(|v| v.abs()).sum();
    let denom = 2.0 * z.rows() as f64 * mass;
    if denom == 0.0 {
        return Err(Error::UndefinedMetric("Gini of all-zero embeddings".into()));
    }
    Ok(num / denom)
}

/// `Tr(Z^T L Z)`.
pub fn trace_if(z: &Tensor, s: &SimilaritySet) -> Result<f64> {
    quadratic_form(s, z)
}

/// The three sides of the norm chain
/// `sum S |.|_2 <= sum S |.|_1 <= sqrt(c) sum S |.|_2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormChain {
    pub weighted_l2: f64,
    pub weighted_l1: f64,
    pub sqrt_c_weighted_l2: f64,
}

pub fn norm_chain(z: &Tensor, s: &SimilaritySet) -> Result<NormChain> {
    check_rows("norm_chain", z, s)?;
    let (mut l1, mut l2) = (0.0, 0.0);
    for &(i, j, w) in s.entries() {
        l1 += 2.0 * w * l1_diff(z.row(i), z.row(j));
        l2 += 2.0 * w * l2_diff(z.row(i), z.row(j));
    }
    Ok(NormChain {
        weighted_l2: l2,
        weighted_l1: l1,
        sqrt_c_weighted_l2: (z.cols() as f64).sqrt() * l2,
    })
}

/// `max(a/b, b/a)` after flooring both values at [`RATIO_FLOOR`].
pub fn gdif(a: f64, b: f64) -> f64 {
    let (a, b) = (a.max(RATIO_FLOOR), b.max(RATIO_FLOOR));
    (a / b).max(b / a)
}

/// Mean of [`gdif`] over all ordered pairs of distinct groups.
pub fn a_gdif(values: &[f64]) -> Result<f64> {
    let m = values.len();
    if m < 2 {
        return Err(Error::Contract(format!("average group disparity needs 2 groups, got {m}")));
    }
    let mut total = 0.0;
    for (i, &a) in values.iter().enumerate() {
        for (j, &b) in values.iter().enumerate() {
            if i != j {
                total += gdif(a, b);
            }
        }
    }
    Ok(total / (m * (m - 1)) as f64)
}

/// Largest [`gdif`] over pairs of groups.
pub fn max_gdif(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::Contract("group disparity needs 2 groups".into()));
    }
    let mut best: f64 = 1.0;
    for (i, &a) in values.iter().enumerate() {
        for &b in &values[i + 1..] {
            best = best.max(gdif(a, b));
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupMetricKind {
    Trace,
    Gini,
}

/// Per-group trace or Gini on the similarity induced by each group.
/// Groups with fewer than two nodes are `None`.
pub fn group_metric(
    z: &Tensor,
    s: &SimilaritySet,
    partition: &GroupPartition,
    kind: GroupMetricKind,
) -> Result<Vec<Option<f64>>> {
    check_rows("group_metric", z, s)?;
    if partition.n() != z.rows() {
        return Err(Error::dim(
            "group_metric",
            format!("partition of {} nodes for {} rows", partition.n(), z.rows()),
        ));
    }
    (0..partition.num_groups())
        .map(|g| {
            let members = partition.members(g);
            if members.len() < 2 {
                log::warn!("group {g} has {} node(s); excluded", members.len());
                return Ok(None);
            }
            let zg = z.select_rows(&members)?;
            let sg = s.induced(&members);
            match kind {
                GroupMetricKind::Trace => trace_if(&zg, &sg).map(Some),
                GroupMetricKind::Gini => match weighted_gini(&zg, &sg) {
                    Ok(v) => Ok(Some(v)),
                    // An all-zero group has no inequality.
                    Err(Error::UndefinedMetric(_)) => Ok(Some(0.0)),
                    Err(e) => Err(e),
                },
            }
        })
        .collect()
}

/// Largest gap in true-positive rate between groups, in percentage points.
/// A node is predicted positive when its score exceeds `threshold`.
pub fn equal_opportunity(scores: &[f64], labels: &[u8], partition: &GroupPartition, threshold: f64) -> Result<f64> {
    if scores.len() != labels.len() || partition.n() != labels.len() {
        return Err(Error::dim(
            "equal_opportunity",
            format!("{} scores, {} labels, {} partitioned nodes", scores.len(), labels.len(), partition.n()),
        ));
    }
    let m = partition.num_groups();
    let mut positives = vec![0usize; m];
    let mut hits = vec![0usize; m];
    for ((&s, &y), &g) in scores.iter().zip(labels).zip(partition.assignments()) {
        if y == 1 {
            positives[g] += 1;
            if s > threshold {
                hits[g] += 1;
            }
        }
    }
    let tprs: Vec<f64> = (0..m)
        .filter_map(|g| {
            if positives[g] == 0 {
                log::warn!("group {g} has no positive labels; excluded from equal opportunity");
                None
            } else {
                Some(hits[g] as f64 / positives[g] as f64)
            }
        })
        .collect();
    if tprs.len() < 2 {
        return Err(Error::UndefinedMetric("equal opportunity needs two groups with positives".into()));
    }
    let hi = tprs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = tprs.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(100.0 * (hi - lo))
}

/// Area under the ROC curve via the Mann-Whitney statistic; ties count one
/// half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("auc", format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average ranks over tie blocks, then the rank-sum form of U.
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let avg_rank = (start + end + 1) as f64 / 2.0;
        rank_sum_pos += avg_rank * order[start..end].iter().filter(|&&i| labels[i] == 1).count() as f64;
        start = end;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// F1 score of class 1; zero when precision or recall is undefined.
pub fn f1(predictions: &[u8], labels: &[u8]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::dim("f1", "prediction and label counts differ"));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p, y) {
            (1, 1) => tp += 1,
            (1, _) => fp += 1,
            (_, 1) => fneg += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fneg) as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Fraction of pairs whose disparity reaches `epsilon`, and the Markov bound
/// `mean(disparity) / epsilon` on that fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailFraction {
    pub fraction: f64,
    pub markov_bound: f64,
}

pub fn tail_fraction_of(disparities: &[f64], epsilon: f64) -> Result<TailFraction> {
    if !(epsilon > 0.0) {
        return Err(Error::Contract(format!("epsilon {epsilon} must be positive")));
    }
    if disparities.is_empty() {
        return Err(Error::Contract("tail fraction over an empty pair set".into()));
    }
    let m = disparities.len() as f64;
    let over = disparities.iter().filter(|&&d| d >= epsilon).count() as f64;
    let mean = disparities.iter().sum::<f64>() / m;
    Ok(TailFraction {
        fraction: over / m,
        markov_bound: mean / epsilon,
    })
}

/// [`tail_fraction_of`] with disparities `|z_i - z_j|_2` over `pairs`.
pub fn tail_fraction(z: &Tensor, pairs: &[(usize, usize)], epsilon: f64) -> Result<TailFraction> {
    let d: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| {
            if i >= z.rows() || j >= z.rows() {
                Err(Error::dim("tail_fraction", format!("pair ({i}, {j})")))
            } else {
                Ok(l2_diff(z.row(i), z.row(j)))
            }
        })
        .collect::<Result<_>>()?;
    tail_fraction_of(&d, epsilon)
}

/// Column order of [`MetricsReport::CSV_HEADER`] and the JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(with = "nan_as_null")]
    pub auc: f64,
    #[serde(with = "nan_as_null")]
    pub f1: f64,
    /// `Tr(Z^T L Z)`, raw (not divided by 1000).
    pub if_trace: f64,
    /// Average over ordered group pairs of the trace ratio.
    pub gd_trace: f64,
    /// Average over ordered group pairs of the Gini ratio.
    pub a_gdif: f64,
    pub if_gini: f64,
    /// Worst pair of groups for the Gini ratio.
    pub gd_gini: f64,
    /// Percentage points.
    #[serde(with = "nan_as_null")]
    pub eo: f64,
    pub per_group_gini: Vec<f64>,
}

/// JSON has no NaN; undefined metrics travel as `null`.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

impl MetricsReport {
    pub const CSV_HEADER: [&'static str; 9] = [
        "auc",
        "f1",
        "if_trace",
        "gd_trace",
        "a_gdif",
        "if_gini",
        "gd_gini",
        "eo",
        "per_group_gini",
    ];

    /// One CSV row; `if_scale` divides the trace (1000 for "thousands").
    /// Per-group values are joined with `;`.
    pub fn csv_row(&self, if_scale: f64) -> Vec<String> {
        vec![
            self.auc.to_string(),
            self.f1.to_string(),
            (self.if_trace / if_scale).to_string(),
            self.gd_trace.to_string(),
            self.a_gdif.to_string(),
            self.if_gini.to_string(),
            self.gd_gini.to_string(),
            self.eo.to_string(),
            self.per_group_gini
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(";"),
        ]
    }
}

/// Inputs to [`audit`]: embeddings, the similarity over the same rows, and
/// optionally scores and labels for the prediction metrics.
#[derive(Debug, Clone, Copy)]
pub struct AuditInput<'a> {
    pub embeddings: &'a Tensor,
    pub similarity: &'a SimilaritySet,
    pub partition: &'a GroupPartition,
    /// Sigmoid scores per row.
    pub scores: Option<&'a [f64]>,
    pub labels: Option<&'a [u8]>,
    pub eo_threshold: f64,
}

/// Computes a full [`MetricsReport`]. Prediction metrics that cannot be
/// evaluated (no scores, one class present) are reported as NaN.
pub fn audit(input: AuditInput<'_>) -> Result<MetricsReport> {
    let AuditInput {
        embeddings: z,
        similarity: s,
        partition,
        scores,
        labels,
        eo_threshold,
    } = input;
    let if_trace = trace_if(z, s)?;
    let if_gini = match weighted_gini(z, s) {
        Ok(g) => g,
        Err(Error::UndefinedMetric(_)) => 0.0,
        Err(e) => return Err(e),
    };
    let traces: Vec<f64> = group_metric(z, s, partition, GroupMetricKind::Trace)?
        .into_iter()
        .flatten()
        .collect();
    let ginis: Vec<f64> = group_metric(z, s, partition, GroupMetricKind::Gini)?
        .into_iter()
        .flatten()
        .collect();
    let or_one = |r: Result<f64>| r.unwrap_or(1.0);
    let (auc_v, f1_v, eo_v) = match (scores, labels) {
        (Some(sc), Some(y)) => {
            let preds: Vec<u8> = sc.iter().map(|&p| u8::from(p > eo_threshold)).collect();
            (
                auc(sc, y).unwrap_or(f64::NAN),
                f1(&preds, y)?,
                equal_opportunity(sc, y, partition, eo_threshold).unwrap_or(f64::NAN),
            )
        }
        _ => (f64::NAN, f64::NAN, f64::NAN),
    };
    Ok(MetricsReport {
        auc: auc_v,
        f1: f1_v,
        if_trace,
        gd_trace: or_one(a_gdif(&traces)),
        a_gdif: or_one(a_gdif(&ginis)),
        if_gini,
        gd_gini: or_one(max_gdif(&ginis)),
        eo: eo_v,
        per_group_gini: ginis,
    })
}
