use ginigraph::experiments::sweep::{aggregate, read_run_records};
use ginigraph::experiments::{
    emit_report, kmeans_elbow, perturb_noise, read_json_reports, rewire_homophily, run_once, run_sweep,
    same_label_fraction, sbm_generate, spearman, GraphSource, Perturbation, Presentation, ReportFormat, RunConfig,
    SbmSpec, SweepSpec,
};
use ginigraph::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SMALL: &str = "sbm.block_sizes = 100, 100\nsbm.p_within = 0.08\nsbm.p_between = 0.01\n\
                     pretrain_epochs = 60\nmax_epochs = 80\npatience = 20\ntop_k = 20\n";

#[test]
fn sbm_edge_count_matches_binomial_expectation() {
    let spec = SbmSpec::default();
    let (a, b) = (spec.block_sizes[0] as f64, spec.block_sizes[1] as f64);
    let within = a * (a - 1.0) / 2.0 + b * (b - 1.0) / 2.0;
    let var = within * spec.p_within * (1.0 - spec.p_within) + a * b * spec.p_between * (1.0 - spec.p_between);
    for seed in 0..20 {
        let g = sbm_generate(&spec, seed).unwrap();
        let dev = (g.edges().len() as f64 - spec.expected_edges()).abs();
        assert!(dev <= 3.0 * var.sqrt(), "seed {seed}: {} edges", g.edges().len());
        let minority = g.sensitive.iter().filter(|&&s| s == 1).count() as f64 / g.n() as f64;
        assert!((minority - 0.22).abs() <= 0.02);
    }
}

#[test]
fn sbm_is_deterministic() {
    let spec = SbmSpec::default();
    assert_eq!(sbm_generate(&spec, 9).unwrap(), sbm_generate(&spec, 9).unwrap());
    assert_ne!(sbm_generate(&spec, 9).unwrap().edges(), sbm_generate(&spec, 10).unwrap().edges());
}

fn blobs(per: usize, seed: u64) -> Tensor {
    let centers = [[0.0, 0.0, 0.0, 0.0], [20.0, 0.0, 0.0, 0.0], [0.0, 20.0, 20.0, 0.0]];
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = centers
        .iter()
        .flat_map(|c| {
            (0..per)
                .map(|_| c.iter().map(|v| v + 0.3 * r.sample::<f64, _>(StandardNormal)).collect())
                .collect::<Vec<Vec<f64>>>()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn elbow_finds_three_blobs() {
    let x = blobs(30, 1);
    let e = kmeans_elbow(&x, 6, 0).unwrap();
    assert_eq!(e.k, 3, "wcss {:?}", e.wcss);
    for b in 0..3 {
        let first = e.clustering.assignments[b * 30];
        assert!(e.clustering.assignments[b * 30..(b + 1) * 30].iter().all(|&a| a == first));
    }
    assert_eq!(e.partition().unwrap().num_groups(), 3);
}

#[test]
fn elbow_on_identical_points_is_one() {
    let x = Tensor::filled(12, 4, 2.5);
    let e = kmeans_elbow(&x, 4, 3).unwrap();
    assert_eq!(e.k, 1);
    assert_eq!(e.wcss[0], 0.0);
}

#[test]
fn elbow_is_deterministic() {
    let x = blobs(20, 5);
    let a = kmeans_elbow(&x, 5, 11).unwrap();
    let b = kmeans_elbow(&x, 5, 11).unwrap();
    assert_eq!(a.clustering.assignments, b.clustering.assignments);
    assert_eq!(a.wcss, b.wcss);
}

#[test]
fn rewiring_raises_homophily_and_keeps_edges() {
    let spec = SbmSpec {
        p_between: 0.02,
        ..SbmSpec::default()
    };
    let mut gains = 0.0;
    for seed in 0..10 {
        let g = sbm_generate(&spec, seed).unwrap();
        let (g0, r0) = rewire_homophily(&g, 0.0, seed).unwrap();
        let (g8, r8) = rewire_homophily(&g, 0.8, seed).unwrap();
        assert_eq!(g0.edges(), g.edges());
        assert_eq!(r0.selected, 0);
        assert_eq!(g8.edges().len(), g.edges().len());
        assert_eq!(g8.n(), g.n());
        assert_eq!(r8.selected, (0.8 * g.edges().len() as f64).floor() as usize);
        gains += same_label_fraction(&g8) - same_label_fraction(&g0);
    }
    assert!(gains / 10.0 > 0.0);
}

#[test]
fn noise_has_the_requested_moments() {
    let (n, d) = (1000, 100);
    let x = Tensor::filled(n, d, 1.5);
    for (sigma, seed) in [(0.1, 1), (0.4, 2), (2.0, 3)] {
        let y = perturb_noise(&x, sigma, seed).unwrap();
        let diff: Vec<f64> = y.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
        let m = diff.iter().sum::<f64>() / diff.len() as f64;
        let sd = (diff.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (diff.len() - 1) as f64).sqrt();
        assert!(m.abs() <= 3.0 * sigma / ((n * d) as f64).sqrt(), "mean {m}");
        assert!((sd - sigma).abs() <= 0.05 * sigma, "std {sd}");
    }
    assert_eq!(perturb_noise(&x, 0.0, 1).unwrap(), x);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn rewiring_preserves_edge_count(seed in 0u64..1000, rho in 0.0f64..=1.0) {
        let spec = SbmSpec { block_sizes: vec![30, 30], p_within: 0.2, p_between: 0.05, ..SbmSpec::default() };
        let g = sbm_generate(&spec, seed).unwrap();
        let (h, _) = rewire_homophily(&g, rho, seed).unwrap();
        prop_assert_eq!(h.edges().len(), g.edges().len());
        prop_assert!(h.edges().iter().all(|&(a, b)| a < b));
    }
}

fn sweep(text: &str) -> SweepSpec {
    SweepSpec::parse(&format!("{SMALL}{text}")).unwrap()
}

#[test]
fn single_point_sweep_equals_a_direct_run() {
    let spec = sweep("seed = 4\n");
    let source = GraphSource::Sbm(spec.base.sbm.clone());
    let table = run_sweep(&source, &spec, None, 1).unwrap();
    assert_eq!(table.rows.len(), 1);
    let direct = run_once(&source, &spec.base, Perturbation::default(), 4).unwrap();
    let rec = &table.records[0];
    assert_eq!(rec.report.as_ref().unwrap(), &direct.report);
    assert_eq!(rec.epochs, direct.log.len());
    assert_eq!(table.rows[0].if_trace.mean, direct.report.if_trace);
    assert_eq!(table.rows[0].if_trace.std, 0.0);
}

#[test]
fn aggregation_matches_per_run_files() {
    let dir = tempfile::tempdir().unwrap();
    let spec = sweep("gradnorm = off\nbeta3 = 0\nbeta2 = 0, 1\nrepetitions = 3\n");
    let source = GraphSource::Sbm(spec.base.sbm.clone());
    let table = run_sweep(&source, &spec, Some(dir.path()), 2).unwrap();
    let records = read_run_records(dir.path()).unwrap();
    assert_eq!(records.len(), 6);
    let again = aggregate(&spec.points(), &records);
    for (row, other) in table.rows.iter().zip(&again) {
        // Independent pass: mean and sample std straight from the files.
        let vals: Vec<f64> = records
            .iter()
            .filter(|r| r.point == row.point)
            .map(|r| r.report.as_ref().unwrap().if_trace)
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (vals.len() - 1) as f64).sqrt();
        assert!((row.if_trace.mean - m).abs() <= 1e-9 * m.max(1.0));
        assert!((row.if_trace.std - sd).abs() <= 1e-9 * sd.max(1.0));
        assert!((row.auc.mean - other.auc.mean).abs() <= 1e-9);
        assert!((row.gd_trace.std - other.gd_trace.std).abs() <= 1e-9);
    }
    let csv = dir.path().join("table.csv");
    table.write_csv(&csv).unwrap();
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 3);
}

#[test]
fn larger_trace_weight_lowers_individual_unfairness() {
    let spec = sweep("gradnorm = off\nbeta3 = 0\nbeta2 = 0, 0.01, 0.1, 1, 10\nrepetitions = 2\n");
    let source = GraphSource::Sbm(spec.base.sbm.clone());
    let table = run_sweep(&source, &spec, None, 2).unwrap();
    let b2: Vec<f64> = table.rows.iter().map(|r| r.point.beta2).collect();
    let ifs: Vec<f64> = table.rows.iter().map(|r| r.if_trace.mean).collect();
    let rho = spearman(&b2, &ifs).unwrap();
    assert!(rho < 0.0, "IF by beta2 {ifs:?}, spearman {rho}");
}

#[test]
fn homophily_sweep_trend() {
    let spec = sweep("rho = 0, 0.2, 0.4, 0.6, 0.8\nrepetitions = 2\n");
    let source = GraphSource::Sbm(spec.base.sbm.clone());
    let table = run_sweep(&source, &spec, None, 2).unwrap();
    let rho: Vec<f64> = table.rows.iter().map(|r| r.point.rho).collect();
    let ifs: Vec<f64> = table.rows.iter().map(|r| r.if_trace.mean).collect();
    let s = spearman(&rho, &ifs).unwrap();
    assert!(s < 0.0, "IF by rho {ifs:?}, spearman {s}");
}

#[test]
fn reports_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(SMALL).unwrap();
    let source = GraphSource::Sbm(cfg.sbm.clone());
    let reports: Vec<_> = (0..2)
        .map(|s| run_once(&source, &cfg, Perturbation::default(), s).unwrap().report)
        .collect();
    let json = dir.path().join("r.json");
    emit_report(&reports, ReportFormat::Json, Presentation::Raw, &json).unwrap();
    let back = read_json_reports(&json).unwrap();
    for (a, b) in back.iter().zip(&reports) {
        assert_eq!(a.if_trace.to_bits(), b.if_trace.to_bits());
        assert_eq!(a.auc.to_bits(), b.auc.to_bits());
    }
    let csv = dir.path().join("r.csv");
    emit_report(&reports, ReportFormat::Csv, Presentation::Thousands, &csv).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    let second: f64 = text.lines().nth(2).unwrap().split(',').nth(2).unwrap().parse().unwrap();
    assert!((second - reports[1].if_trace / 1000.0).abs() <= 1e-12 * reports[1].if_trace);
}
