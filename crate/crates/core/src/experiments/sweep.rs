//! Grid sweeps over loss weights, perturbation strength and width.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

use super::config::{entries, list, num, RunConfig};
use super::run::{run_once, GraphSource, Perturbation};

/// Parameter grid. An empty list means "the base value only".
///
/// Loss weights are fixed when the base config has GradNorm off and are
/// starting weights otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub beta2: Vec<f64>,
    pub beta3: Vec<f64>,
    pub rho: Vec<f64>,
    pub sigma: Vec<f64>,
    pub hidden: Vec<usize>,
    pub repetitions: usize,
    /// One seed per repetition; defaults to `base seed + r`.
    pub seeds: Vec<u64>,
    pub base: RunConfig,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            beta2: Vec::new(),
            beta3: Vec::new(),
            rho: Vec::new(),
            sigma: Vec::new(),
            hidden: Vec::new(),
            repetitions: 1,
            seeds: Vec::new(),
            base: RunConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub beta2: f64,
    pub beta3: f64,
    pub rho: f64,
    pub sigma: f64,
    pub hidden: usize,
}

impl SweepSpec {
    /// Sweep keys (`beta2`, `beta3`, `rho`, `sigma`, `hidden` as lists,
    /// `repetitions`, `seeds`) plus any [`RunConfig`] key for the base.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = SweepSpec::default();
        for (line, key, value) in entries(text)? {
            let at = |e: Error| Error::Config(format!("line {line}: {e}"));
            match key.as_str() {
                "beta2" => spec.beta2 = list(&key, &value).map_err(at)?,
                "beta3" => spec.beta3 = list(&key, &value).map_err(at)?,
                "rho" => spec.rho = list(&key, &value).map_err(at)?,
                "sigma" => spec.sigma = list(&key, &value).map_err(at)?,
                "hidden" => spec.hidden = list(&key, &value).map_err(at)?,
                "repetitions" => spec.repetitions = num(&key, &value).map_err(at)?,
                "seeds" => spec.seeds = list(&key, &value).map_err(at)?,
                _ => spec.base.set(&key, &value).map_err(at)?,
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut spec = SweepSpec::parse(&fs::read_to_string(path)?)?;
        if let Some(seed) = super::config::seed_override()? {
            spec.base.train.seed = seed;
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if !self.seeds.is_empty() && self.seeds.len() != self.repetitions {
            return Err(Error::Config(format!(
                "{} seeds for {} repetitions",
                self.seeds.len(),
                self.repetitions
            )));
        }
        let weights_ok = self.beta2.iter().chain(&self.beta3).all(|b| b.is_finite() && *b >= 0.0);
        let rho_ok = self.rho.iter().all(|r| (0.0..=1.0).contains(r));
        let sigma_ok = self.sigma.iter().all(|s| s.is_finite() && *s >= 0.0);
        if !(weights_ok && rho_ok && sigma_ok) || self.hidden.contains(&0) {
            return Err(Error::Config("grid values out of range".into()));
        }
        Ok(())
    }

    pub fn seed(&self, repetition: usize) -> u64 {
        self.seeds
            .get(repetition)
            .copied()
            .unwrap_or(self.base.train.seed + repetition as u64)
    }

    /// Cartesian product in the order beta2, beta3, rho, sigma, hidden, the
    /// last varying fastest.
    pub fn points(&self) -> Vec<GridPoint> {
        let t = &self.base.train;
        let or = |v: &[f64], d: f64| if v.is_empty() { vec![d] } else { v.to_vec() };
        let hidden = if self.hidden.is_empty() { vec![t.hidden] } else { self.hidden.clone() };
        let mut out = Vec::new();
        for &beta2 in &or(&self.beta2, t.beta[1]) {
            for &beta3 in &or(&self.beta3, t.beta[2]) {
                for &rho in &or(&self.rho, 0.0) {
                    for &sigma in &or(&self.sigma, 0.0) {
                        for &h in &hidden {
                            out.push(GridPoint {
                                beta2,
                                beta3,
                                rho,
                                sigma,
                                hidden: h,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    /// Base config with the grid point applied.
    pub fn config_at(&self, p: &GridPoint) -> RunConfig {
        let mut cfg = self.base.clone();
        cfg.train.beta[1] = p.beta2;
        cfg.train.beta[2] = p.beta3;
        cfg.train.hidden = p.hidden;
        cfg
    }
}

/// Outcome of one grid point and repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub point_index: usize,
    pub point: GridPoint,
    pub repetition: usize,
    pub seed: u64,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
    pub epochs: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        if values.is_empty() {
            return Stat { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Stat { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: GridPoint,
    pub runs: usize,
    pub failures: usize,
    pub auc: Stat,
    pub if_trace: Stat,
    pub gd_trace: Stat,
    pub if_gini: Stat,
    pub gd_gini: Stat,
}

pub const SWEEP_HEADER: [&str; 17] = [
    "beta2", "beta3", "rho", "sigma", "hidden", "runs", "failures", "auc_mean", "auc_std", "if_mean", "if_std",
    "gd_mean", "gd_std", "if_gini_mean", "if_gini_std", "gd_gini_mean", "gd_gini_std",
];

impl SweepRow {
    fn record(&self) -> Vec<String> {
        let p = &self.point;
        let mut r = vec![
            p.beta2.to_string(),
            p.beta3.to_string(),
            p.rho.to_string(),
            p.sigma.to_string(),
            p.hidden.to_string(),
            self.runs.to_string(),
            self.failures.to_string(),
        ];
        for s in [self.auc, self.if_trace, self.gd_trace, self.if_gini, self.gd_gini] {
            r.push(s.mean.to_string());
            r.push(s.std.to_string());
        }
        r
    }
}

/// Groups records by grid point, in point order.
pub fn aggregate(points: &[GridPoint], records: &[RunRecord]) -> Vec<SweepRow> {
    points
        .iter()
        .enumerate()
        .map(|(k, &point)| {
            let mine: Vec<&RunRecord> = records.iter().filter(|r| r.point_index == k).collect();
            let ok: Vec<&MetricsReport> = mine.iter().filter_map(|r| r.report.as_ref()).collect();
            let stat = |f: fn(&MetricsReport) -> f64| Stat::of(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
            SweepRow {
                point,
                runs: mine.len(),
                failures: mine.len() - ok.len(),
                auc: stat(|r| r.auc),
                if_trace: stat(|r| r.if_trace),
                gd_trace: stat(|r| r.gd_trace),
                if_gini: stat(|r| r.if_gini),
                gd_gini: stat(|r| r.gd_gini),
            }
        })
        .collect()
}

/// Rows not dominated in (higher mean AUC, lower mean IF).
pub fn frontier(rows: &[SweepRow]) -> Vec<usize> {
    let dominated = |a: &SweepRow| {
        rows.iter().any(|b| {
            b.auc.mean >= a.auc.mean
                && b.if_trace.mean <= a.if_trace.mean
                && (b.auc.mean > a.auc.mean || b.if_trace.mean < a.if_trace.mean)
        })
    };
    (0..rows.len())
        .filter(|&i| rows[i].auc.mean.is_finite() && rows[i].if_trace.mean.is_finite() && !dominated(&rows[i]))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub records: Vec<RunRecord>,
}

impl SweepTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, self.rows.iter())
    }

    /// The utility-fairness frontier rows, sorted by mean IF.
    pub fn write_frontier_csv(&self, path: &Path) -> Result<()> {
        let mut idx = frontier(&self.rows);
        idx.sort_by(|&a, &b| self.rows[a].if_trace.mean.total_cmp(&self.rows[b].if_trace.mean));
        write_rows(path, idx.iter().map(|&i| &self.rows[i]))
    }
}

fn write_rows<'a>(path: &Path, rows: impl Iterator<Item = &'a SweepRow>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SWEEP_HEADER)?;
    for row in rows {
        w.write_record(row.record())?;
    }
    w.flush()?;
    Ok(())
}

/// Name of the per-run file inside the run directory.
pub fn run_file_name(point_index: usize, repetition: usize) -> String {
    format!("point{point_index:03}-rep{repetition:02}.json")
}

/// Reads every per-run JSON file in `dir`, sorted by name.
pub fn read_run_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    paths
        .iter()
        .map(|p| Ok(serde_json::from_slice(&fs::read(p)?)?))
        .collect()
}

/// Runs every grid point and repetition on up to `threads` workers. A
/// failed run is recorded and the sweep continues. With `run_dir` set,
/// each record is also written there as JSON.
pub fn run_sweep(source: &GraphSource, spec: &SweepSpec, run_dir: Option<&Path>, threads: usize) -> Result<SweepTable> {
    spec.validate()?;
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir)?;
    }
    let points = spec.points();
    let jobs: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|p| (0..spec.repetitions).map(move |r| (p, r)))
        .collect();
    let slots: Vec<Mutex<Option<RunRecord>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let io_error: Mutex<Option<Error>> = Mutex::new(None);
    let worker = || loop {
        let j = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(p, r)) = jobs.get(j) else { break };
        let point = points[p];
        let seed = spec.seed(r);
        let cfg = spec.config_at(&point);
        let perturbation = Perturbation {
            rho: point.rho,
            sigma: point.sigma,
        };
        let t = std::time::Instant::now();
        let outcome = run_once(source, &cfg, perturbation, seed);
        let record = match outcome {
            Ok(res) => RunRecord {
                point_index: p,
                point,
                repetition: r,
                seed,
                report: Some(res.report),
                error: None,
                epochs: res.log.len(),
                seconds: t.elapsed().as_secs_f64(),
            },
            Err(e) => {
                log::warn!("sweep point {p} repetition {r} failed: {e}");
                RunRecord {
                    point_index: p,
                    point,
                    repetition: r,
                    seed,
                    report: None,
                    error: Some(e.to_string()),
                    epochs: 0,
                    seconds: t.elapsed().as_secs_f64(),
                }
            }
        };
        if let Some(dir) = run_dir {
            let written = serde_json::to_vec_pretty(&record)
                .map_err(Error::from)
                .and_then(|bytes| Ok(fs::write(dir.join(run_file_name(p, r)), bytes)?));
            if let Err(e) = written {
                io_error.lock().unwrap().get_or_insert(e);
            }
        }
        *slots[j].lock().unwrap() = Some(record);
    };
    std::thread::scope(|s| {
        for _ in 0..threads.max(1).min(jobs.len()) {
            s.spawn(worker);
        }
    });
    if let Some(e) = io_error.into_inner().unwrap() {
        return Err(e);
    }
    let records: Vec<RunRecord> = slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every job runs"))
        .collect();
    Ok(SweepTable {
        rows: aggregate(&points, &records),
        records,
    })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Contract(format!("spearman needs two equal-length series, got {} and {}", x.len(), y.len())));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::UndefinedMetric("spearman of NaN values".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::UndefinedMetric("spearman of a constant series".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        // Ranks (1, 2.5, 2.5, 4) against (1, 2, 3, 4).
        let r = spearman(&[1.0, 5.0, 5.0, 9.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((r - 4.5 / (4.5f64 * 5.0).sqrt()).abs() < 1e-15);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn grid_order_and_defaults() {
        let spec = SweepSpec::parse("beta2 = 0, 1\nrho = 0.2, 0.4\nrepetitions = 2\ngradnorm = off\n").unwrap();
        let pts = spec.points();
        assert_eq!(pts.len(), 4);
        assert_eq!((pts[1].beta2, pts[1].rho), (0.0, 0.4));
        assert_eq!(pts[0].beta3, 1.0);
        assert_eq!(pts[0].hidden, 16);
        assert_eq!((spec.seed(0), spec.seed(1)), (0, 1));
        assert!(!spec.base.train.gradnorm);
    }

    #[test]
    fn bad_specs() {
        assert!(SweepSpec::parse("repetitions = 0").is_err());
        assert!(SweepSpec::parse("repetitions = 2\nseeds = 1").is_err());
        assert!(SweepSpec::parse("rho = 1.5").is_err());
        assert!(SweepSpec::parse("colour = red").is_err());
    }

    #[test]
    fn stats_and_frontier() {
        let s = Stat::of(&[1.0, 2.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        assert_eq!(Stat::of(&[4.0]).std, 0.0);
        let row = |auc: f64, ift: f64| SweepRow {
            point: GridPoint { beta2: 0.0, beta3: 0.0, rho: 0.0, sigma: 0.0, hidden: 1 },
            runs: 1,
            failures: 0,
            auc: Stat { mean: auc, std: 0.0 },
            if_trace: Stat { mean: ift, std: 0.0 },
            gd_trace: Stat::of(&[1.0]),
            if_gini: Stat::of(&[0.0]),
            gd_gini: Stat::of(&[1.0]),
        };
        let rows = [row(0.9, 10.0), row(0.8, 5.0), row(0.7, 6.0), row(0.9, 12.0)];
        assert_eq!(frontier(&rows), vec![0, 1]);
    }
}
