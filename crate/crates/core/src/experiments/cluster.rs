//! k-means with farthest-point seeding and an elbow rule for choosing k.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::GroupPartition;
use crate::tensor::Tensor;

pub const MAX_ITERATIONS: usize = 50;
/// The elbow is the first k whose step to k + 1 removes less than this
/// fraction of the within-cluster sum of squares.
pub const ELBOW_DROP: f64 = 0.10;

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    pub centers: Tensor,
    pub wcss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Elbow {
    pub k: usize,
    /// `wcss[k - 1]` for `k = 1..=k_max`.
    pub wcss: Vec<f64>,
    pub clustering: Clustering,
}

impl Elbow {
    pub fn partition(&self) -> Result<GroupPartition> {
        GroupPartition::new(self.clustering.assignments.clone())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(row: &[f64], centers: &Tensor) -> (usize, f64) {
    (0..centers.rows())
        .map(|c| (c, sq_dist(row, centers.row(c))))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// Lloyd iterations from greedy farthest-point seeds. The first seed is
/// drawn with `rng`; each later seed is the point farthest from the chosen
/// ones (lowest index on ties). Empty clusters keep their previous center.
pub fn kmeans<R: Rng + ?Sized>(x: &Tensor, k: usize, rng: &mut R) -> Result<Clustering> {
    let n = x.rows();
    if k == 0 || n < k {
        return Err(Error::Contract(format!("k-means with k = {k} on {n} points")));
    }
    let d = x.cols();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut closest: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let far = (0..n).fold(0, |best, i| if closest[i] > closest[best] { i } else { best });
        chosen.push(far);
        for i in 0..n {
            closest[i] = closest[i].min(sq_dist(x.row(i), x.row(far)));
        }
    }
    let mut centers = x.select_rows(&chosen)?;
    let mut assignments = vec![usize::MAX; n];
    for _ in 0..MAX_ITERATIONS {
        let mut changed = false;
        for (i, a) in assignments.iter_mut().enumerate() {
            let (c, _) = nearest(x.row(i), &centers);
            changed |= *a != c;
            *a = c;
        }
        if !changed {
            break;
        }
        let mut sums = Tensor::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in (0..k).filter(|&c| counts[c] > 0) {
            let inv = 1.0 / counts[c] as f64;
            for (dst, s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                *dst = s * inv;
            }
        }
    }
    let wcss = (0..n).map(|i| sq_dist(x.row(i), centers.row(assignments[i]))).sum();
    Ok(Clustering { assignments, centers, wcss })
}

/// Runs k-means for `k = 1..=k_max` and picks the smallest k whose relative
/// WCSS drop to `k + 1` is below [`ELBOW_DROP`]. A zero WCSS stops the
/// search at that k. Every k uses a generator seeded from `seed`.
pub fn kmeans_elbow(x: &Tensor, k_max: usize, seed: u64) -> Result<Elbow> {
    if k_max < 2 {
        return Err(Error::Contract(format!("k_max = {k_max} must be at least 2")));
    }
    if x.rows() < k_max {
        return Err(Error::Contract(format!("{} points cannot form {k_max} clusters", x.rows())));
    }
    let runs: Vec<Clustering> = (1..=k_max)
        .map(|k| kmeans(x, k, &mut ChaCha8Rng::seed_from_u64(seed)))
        .collect::<Result<_>>()?;
    let wcss: Vec<f64> = runs.iter().map(|r| r.wcss).collect();
    let k = (1..k_max)
        .find(|&k| {
            let (w, next) = (wcss[k - 1], wcss[k]);
            w <= 0.0 || (w - next) / w < ELBOW_DROP
        })
        .unwrap_or(k_max);
    Ok(Elbow {
        k,
        wcss,
        clustering: runs[k - 1].clone(),
    })
}
