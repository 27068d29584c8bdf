//! Acceptance suite: twelve criteria, one PASS/FAIL line each.
//!
//! Runs as a plain binary (`harness = false`) so the summary lines are always
//! printed; the process exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use ginigraph::autodiff::{finite_diff_check, Tape};
use ginigraph::experiments::{
    perturb_noise, prepare, rewire_homophily, same_label_fraction, sbm_generate, Prepared, RunConfig,
};
use ginigraph::gradnorm::{self, WeightState};
use ginigraph::graph::{GroupPartition, Graph, Masks};
use ginigraph::losses::{self, GroupContext, LossBundle, Surrogate, GROUP_TRACE_GUARD};
use ginigraph::metrics::{self, MetricsReport, PairScope};
use ginigraph::models::{self, Attention, Backbone, BackboneShape, Params, Propagation};
use ginigraph::similarity::{laplacian_apply, SimilaritySet};
use ginigraph::tensor::Tensor;
use ginigraph::trainer::{self, Objective, Pretrained, RunResult, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct Suite {
    failed: Vec<usize>,
}

impl Suite {
    /// Runs one criterion; `extra_seconds` is time already spent on its
    /// behalf by an earlier criterion.
    fn run(&mut self, id: usize, name: &str, budget: f64, extra_seconds: f64, f: impl FnOnce() -> Outcome) -> f64 {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f));
        let secs = start.elapsed().as_secs_f64();
        let total = secs + extra_seconds;
        let (mut pass, mut detail) = match result {
            Ok(o) => (o.pass, o.detail),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        if total > budget {
            pass = false;
            detail = format!("{detail}; over the {budget:.0}s budget");
        }
        println!(
            "criterion {id:>2} {:<28} {} [{total:.2}s] {detail}",
            name,
            if pass { "PASS" } else { "FAIL" }
        );
        if !pass {
            self.failed.push(id);
        }
        secs
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal_tensor(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

fn random_sim(n: usize, p: f64, r: &mut ChaCha8Rng) -> SimilaritySet {
    let mut e = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if r.gen::<f64>() < p {
                e.push((i, j, r.gen_range(0.01..=1.0)));
            }
        }
    }
    SimilaritySet::from_entries(n, e).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

// ---------------------------------------------------------------- 1

fn lipschitz_fixture() -> Outcome {
    let one = Tensor::from_rows(&[
        [10.0, 10.0, 10.0, 10.0],
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ])
    .unwrap();
    let two = Tensor::from_rows(&[
        [10.0, 10.0, 10.0, 10.0],
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 2.0, 0.0, 0.0],
        [0.0, 0.0, 2.0, 0.0],
        [0.0, 0.0, 0.0, 2.0],
    ])
    .unwrap();
    let s = SimilaritySet::from_entries(5, (0..5).flat_map(|i| (i + 1..5).map(move |j| (i, j, 0.5)))).unwrap();
    let l1 = metrics::lipschitz_constant(&one, &s, 0.0, PairScope::Stored).unwrap();
    let l2 = metrics::lipschitz_constant(&two, &s, 0.0, PairScope::Stored).unwrap();
    let n1 = metrics::gini_numerator(&one, &s).unwrap();
    let n2 = metrics::gini_numerator(&two, &s).unwrap();
    let pass = (l1 - 19.5).abs() <= 1e-9 && (l2 - 19.5).abs() <= 1e-9 && l1 == l2 && n1 != n2;
    outcome(pass, format!("L = {l1}, {l2}; Gini numerators {n1} vs {n2}"))
}

// ---------------------------------------------------------------- 2

fn trace_identity() -> Outcome {
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = r.gen_range(2..=50);
        let c = r.gen_range(1..=8);
        let s = random_sim(n, r.gen_range(0.05..0.9), &mut r);
        let z = normal_tensor(n, c, &mut r);
        let mut dense = vec![vec![0.0; n]; n];
        for &(i, j, w) in s.entries() {
            dense[i][j] = w;
            dense[j][i] = w;
        }
        let mut half_sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                let d2: f64 = z.row(i).iter().zip(z.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                half_sum += 0.5 * dense[i][j] * d2;
            }
        }
        let mut explicit = 0.0;
        for k in 0..c {
            for i in 0..n {
                let deg: f64 = dense[i].iter().sum();
                let lz: f64 = deg * z.get(i, k) - (0..n).map(|j| dense[i][j] * z.get(j, k)).sum::<f64>();
                explicit += z.get(i, k) * lz;
            }
        }
        let fused = metrics::trace_if(&z, &s).unwrap();
        worst = worst.max(rel(fused, half_sum)).max(rel(explicit, half_sum));
    }
    outcome(worst <= 1e-10, format!("max rel err {worst:.2e} over 100 instances"))
}

// ---------------------------------------------------------------- 3

fn norm_chain() -> Outcome {
    let mut r = rng(3);
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let n = r.gen_range(2..=30);
        let c = r.gen_range(1..=10);
        let s = random_sim(n, r.gen_range(0.1..1.0), &mut r);
        let z = normal_tensor(n, c, &mut r).scale(r.gen_range(0.01..10.0));
        let chain = metrics::norm_chain(&z, &s).unwrap();
        let a = chain.weighted_l2 - chain.weighted_l1;
        let b = chain.weighted_l1 - chain.sqrt_c_weighted_l2;
        worst = worst.max(a).max(b);
        if a > 1e-12 || b > 1e-12 {
            violations += 1;
        }
    }
    outcome(violations == 0, format!("{violations} violations; largest excess {worst:.2e}"))
}

// ---------------------------------------------------------------- 4

struct GradFixture {
    graph: Graph,
    prop: Propagation,
    objective: Objective,
    objective_softmax: Objective,
    objective_topk: Objective,
    params: Params,
    kind: Backbone,
}

fn grad_fixture(kind: Backbone, seed: u64) -> GradFixture {
    let n = 20;
    let mut r = rng(seed);
    let features = normal_tensor(n, 5, &mut r);
    let mut edges = Vec::new();
    for i in 0..n {
        edges.push((i, (i + 1) % n));
        for j in i + 2..n {
            if r.gen::<f64>() < 0.15 {
                edges.push((i, j));
            }
        }
    }
    let labels = (0..n).map(|i| Some((i % 2) as u8)).collect();
    let sensitive = (0..n).map(|i| i64::from(i >= n / 2)).collect();
    let (mut graph, _) = Graph::new(features, edges, labels, sensitive).unwrap();
    graph
        .set_masks(Masks {
            train: (0..n).collect(),
            val: vec![],
            test: vec![],
        })
        .unwrap();
    let s = random_sim(n, 0.4, &mut r);
    let partition = GroupPartition::new((0..n).map(|i| usize::from(i >= n / 2)).collect()).unwrap();
    let hidden = 4;
    let mut params = models::init_backbone(
        BackboneShape {
            kind,
            input: 5,
            hidden,
            output: hidden,
        },
        &mut r,
    );
    if kind == Backbone::Gin {
        params.insert("gin.eps1", Tensor::scalar(0.3));
        params.insert("gin.eps2", Tensor::scalar(-0.2));
    }
    let mut fair = models::init_fair(hidden, None, &mut r);
    fair.insert("fair.w", normal_tensor(hidden, hidden, &mut r).scale(0.7));
    fair.insert("fair.a", normal_tensor(2 * hidden, 1, &mut r));
    params.extend(fair);
    let make = |sur| Objective::new(&graph, &s, &partition, sur, Attention::On).unwrap();
    GradFixture {
        objective: make(None),
        objective_softmax: make(Some(Surrogate::softmax())),
        objective_topk: make(Some(Surrogate::TopK { fraction: 0.1 })),
        prop: Propagation::new(&graph),
        graph,
        params,
        kind,
    }
}

#[derive(Clone, Copy, Debug)]
enum Term {
    Utility,
    Trace,
    Group,
    Softmax,
    TopK,
    Total,
}

/// Worst relative error and largest analytic gradient entry.
fn check_term(fx: &GradFixture, term: Term, name: &str) -> (f64, f64) {
    let objective = match term {
        Term::Softmax => &fx.objective_softmax,
        Term::TopK => &fx.objective_topk,
        _ => &fx.objective,
    };
    let loss = |tape: &mut Tape, x| {
        let mut b = fx.params.bind(tape, false);
        b.set(name, x);
        let feats = tape.constant(fx.graph.features.clone());
        let z = models::backbone_forward(tape, &fx.prop, feats, &b, fx.kind)?;
        let out = objective.forward(tape, z, &b)?;
        let LossBundle { utility, individual, group } = out.losses;
        Ok(match term {
            Term::Utility => utility,
            Term::Trace | Term::Softmax | Term::TopK => individual,
            Term::Group => group,
            Term::Total => losses::total_loss(tape, &out.losses, [1.0, 0.7, 1.3])?,
        })
    };
    let point = fx.params.get(name).unwrap();
    let check = finite_diff_check(loss, point, 1e-6, 1e-4).unwrap();
    let size = check.analytic.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (check.max_rel_error, size)
}

fn gradient_correctness() -> Outcome {
    let terms = [Term::Utility, Term::Trace, Term::Group, Term::Softmax, Term::TopK, Term::Total];
    let mut worst: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    let mut all_pass = true;
    for (k, kind) in [Backbone::Gcn, Backbone::Gin, Backbone::Jk].into_iter().enumerate() {
        let fx = grad_fixture(kind, 40 + k as u64);
        for term in terms {
            for name in fx.params.names() {
                if name.starts_with("pretrain.") {
                    continue;
                }
                let (e, size) = check_term(&fx, term, &name);
                all_pass &= e <= 1e-4;
                let w = worst.entry(format!("{kind}/{term:?}")).or_insert((0.0, 0.0));
                *w = (w.0.max(e), w.1.max(size));
            }
        }
    }

    // Closed-form gradient of the trace.
    let mut r = rng(44);
    let mut closed: f64 = 0.0;
    for _ in 0..20 {
        let n = r.gen_range(2..=30);
        let s = Arc::new(random_sim(n, 0.3, &mut r));
        let z = normal_tensor(n, 4, &mut r);
        let mut tape = Tape::new();
        let zn = tape.leaf(z.clone());
        let l = losses::individual_fairness_loss(&mut tape, zn, &s).unwrap();
        let g = tape.backward(l).unwrap().get_or_zeros(zn, &z);
        let expected = laplacian_apply(&s, &z).unwrap().scale(2.0);
        for (a, b) in g.data().iter().zip(expected.data()) {
            closed = closed.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    let overall = worst.values().map(|w| w.0).fold(0.0, f64::max);
    // A term whose gradient vanishes everywhere would pass trivially.
    let flat: Vec<&String> = worst.iter().filter(|(_, w)| w.1 < 1e-6).map(|(k, _)| k).collect();
    let pass = all_pass && flat.is_empty() && closed <= 1e-10;
    outcome(
        pass,
        format!(
            "finite differences: {} term/backbone checks, worst rel err {overall:.2e}, vanishing {flat:?}; 2LZ err {closed:.2e}",
            worst.len()
        ),
    )
}

// ---------------------------------------------------------------- 5

/// Two disjoint two-node groups with traces `a` and `b`.
fn two_groups(a: f64, b: f64) -> (Tensor, GroupContext) {
    let s = SimilaritySet::from_entries(4, [(0, 1, 1.0), (2, 3, 1.0)]).unwrap();
    let z = Tensor::from_rows(&[[a.sqrt()], [0.0], [b.sqrt()], [0.0]]).unwrap();
    let p = GroupPartition::new(vec![0, 0, 1, 1]).unwrap();
    (z, GroupContext::new(&s, &p).unwrap())
}

fn group_loss_value(z: &Tensor, ctx: &GroupContext) -> f64 {
    let mut t = Tape::untraced();
    let zn = t.constant(z.clone());
    let l = losses::group_fairness_loss(&mut t, zn, ctx).unwrap();
    t.value(l).item()
}

fn nswp_properties() -> Outcome {
    let mut r = rng(5);
    let mut negative = 0;
    let mut zero_mismatch = 0;
    for k in 0..500 {
        let n = r.gen_range(6..=30);
        let m = r.gen_range(2..=4);
        let s = random_sim(n, 0.6, &mut r);
        let groups: Vec<usize> = (0..n).map(|i| i % m).collect();
        let p = GroupPartition::new(groups).unwrap();
        let ctx = GroupContext::new(&s, &p).unwrap();
        let z = normal_tensor(n, 3, &mut r);
        let v = group_loss_value(&z, &ctx);
        if v < 0.0 {
            negative += 1;
        }
        // Every fifth instance: equal traces give zero, unequal do not.
        if k % 5 == 0 {
            let t = r.gen_range(0.5..5.0);
            let (ze, ce) = two_groups(t, t);
            let (zu, cu) = two_groups(t, t * r.gen_range(1.01..3.0));
            if group_loss_value(&ze, &ce).abs() > 1e-15 || group_loss_value(&zu, &cu) <= 0.0 {
                zero_mismatch += 1;
            }
        }
    }
    let (z, ctx) = two_groups(2.0, 1.0);
    let fixture = group_loss_value(&z, &ctx);
    let g = GROUP_TRACE_GUARD;
    // With the guard added to each trace the value is 1 / ((1 + g)(2 + g)).
    let guarded = 1.0 / ((1.0 + g) * (2.0 + g));
    let fixture_ok = (fixture - guarded).abs() <= 1e-15 && (fixture - 0.5).abs() <= 2.0 * g;

    let mut pareto_fail = 0;
    for _ in 0..50 {
        let t = r.gen_range(0.5..5.0);
        let eps = r.gen_range(0.01..0.5) * t;
        let (zb, cb) = two_groups(t, t);
        let base = group_loss_value(&zb, &cb);
        let mut prev = base;
        for step in 1..=3 {
            let e = eps * step as f64;
            let (zu, cu) = two_groups(t + e, t);
            let (zd, cd) = two_groups(t - e * 0.5, t);
            let up = group_loss_value(&zu, &cu);
            let down = group_loss_value(&zd, &cd);
            if !(up > prev && down > base) {
                pareto_fail += 1;
            }
            prev = up;
        }
    }
    let pass = negative == 0 && zero_mismatch == 0 && fixture_ok && pareto_fail == 0;
    outcome(
        pass,
        format!(
            "negative {negative}/500, zero-iff-equal mismatches {zero_mismatch}, (2,1) -> {fixture:.12} (|v-0.5| = {:.1e}), Pareto failures {pareto_fail}/50",
            (fixture - 0.5).abs()
        ),
    )
}

// ---------------------------------------------------------------- 6

fn convexity() -> Outcome {
    let mut r = rng(6);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..100 {
        let n = r.gen_range(2..=40);
        let c = r.gen_range(1..=6);
        let s = random_sim(n, 0.4, &mut r);
        let a = normal_tensor(n, c, &mut r);
        let b = normal_tensor(n, c, &mut r).scale(3.0);
        let lam: f64 = r.gen();
        let mix = a.scale(lam).add(&b.scale(1.0 - lam)).unwrap();
        let lhs = metrics::trace_if(&mix, &s).unwrap();
        let rhs = lam * metrics::trace_if(&a, &s).unwrap() + (1.0 - lam) * metrics::trace_if(&b, &s).unwrap();
        worst = worst.max(lhs - rhs);
    }
    outcome(worst <= 1e-10, format!("largest f(mix) - mix(f) = {worst:.2e}"))
}

// ---------------------------------------------------------------- 7

fn markov() -> Outcome {
    let mut r = rng(7);
    let mut violations = 0;
    for _ in 0..200 {
        let n = r.gen_range(3..=30);
        let z = normal_tensor(n, r.gen_range(1..=5), &mut r).scale(r.gen_range(0.1..2.0));
        let pairs = random_sim(n, 0.5, &mut r).support_pairs();
        if pairs.is_empty() {
            continue;
        }
        for eps in [0.1, 0.5, 1.0, 2.0] {
            let t = metrics::tail_fraction(&z, &pairs, eps).unwrap();
            if t.fraction > t.markov_bound {
                violations += 1;
            }
        }
    }
    outcome(violations == 0, format!("{violations} violations over 200 x 4 cases"))
}

// ---------------------------------------------------------------- 8

fn metric_invariants() -> Outcome {
    let mut r = rng(8);
    let mut problems = Vec::new();
    for _ in 0..200 {
        let n = r.gen_range(2..=25);
        let s = random_sim(n, 0.5, &mut r);
        let z = normal_tensor(n, 3, &mut r);
        let g = metrics::weighted_gini(&z, &s).unwrap();
        let scaled = metrics::weighted_gini(&z.scale(r.gen_range(0.01..100.0)), &s).unwrap();
        if !(0.0..=1.0).contains(&g) {
            problems.push(format!("gini {g} outside [0,1]"));
        }
        if (g - scaled).abs() > 1e-10 {
            problems.push(format!("gini not scale invariant: {g} vs {scaled}"));
        }
        let a: f64 = r.gen_range(0.001..10.0);
        let b: f64 = r.gen_range(0.001..10.0);
        if metrics::gdif(a, b) < 1.0 || metrics::gdif(a, a) != 1.0 || (a != b && metrics::gdif(a, b) <= 1.0) {
            problems.push(format!("gdif({a}, {b})"));
        }
    }
    let ag = metrics::a_gdif(&[1.0, 2.0, 4.0]).unwrap();
    if ag != 8.0 / 3.0 {
        problems.push(format!("A-GDIF(1,2,4) = {ag}"));
    }
    let auc = metrics::auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
    if auc != 0.75 {
        problems.push(format!("AUC fixture = {auc}"));
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!("A-GDIF(1,2,4) = {ag}, AUC = {auc}")
        } else {
            problems.join("; ")
        },
    )
}

// ---------------------------------------------------------------- 9-11

struct SeedRuns {
    prepared: Prepared,
    pre: Pretrained,
    runs: BTreeMap<&'static str, RunResult>,
}

fn base_config() -> RunConfig {
    RunConfig::default()
}

fn variant(name: &str, base: &TrainConfig) -> TrainConfig {
    let mut c = base.clone();
    match name {
        "vanilla" => c.beta = [1.0, 0.0, 0.0],
        "full" => {}
        "fixed" => c.gradnorm = false,
        "attention-off" => c.attention = Attention::Off,
        "no-group" => c.beta = [1.0, 1.0, 0.0],
        "no-individual" => c.beta = [1.0, 0.0, 1.0],
        other => panic!("unknown variant {other}"),
    }
    c
}

fn bench_seed(seed: u64) -> SeedRuns {
    let cfg = base_config();
    let graph = sbm_generate(&cfg.sbm, seed).unwrap();
    let prepared = prepare(graph, &cfg, seed).unwrap();
    let mut train = cfg.train.clone();
    train.seed = seed;
    let pre = trainer::pretrain(&prepared.graph, &train).unwrap();
    SeedRuns {
        prepared,
        pre,
        runs: BTreeMap::new(),
    }
}

fn ensure(runs: &mut SeedRuns, seed: u64, name: &'static str) {
    if runs.runs.contains_key(name) {
        return;
    }
    let mut train = base_config().train;
    train.seed = seed;
    let c = variant(name, &train);
    let p = &runs.prepared;
    let result = trainer::train_from(&p.graph, &p.similarity, &p.partition, &c, &runs.pre).unwrap();
    runs.runs.insert(name, result);
}

fn report<'a>(bench: &'a [SeedRuns], name: &str) -> Vec<&'a MetricsReport> {
    bench.iter().map(|b| &b.runs[name].report).collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn synthetic_benchmark(bench: &mut Vec<SeedRuns>) -> Outcome {
    for &seed in &SEEDS {
        let mut runs = bench_seed(seed);
        for name in ["vanilla", "full", "fixed"] {
            ensure(&mut runs, seed, name);
        }
        bench.push(runs);
    }
    let van = report(bench, "vanilla");
    let full = report(bench, "full");
    let if_van = mean(van.iter().map(|r| r.if_trace));
    let if_full = mean(full.iter().map(|r| r.if_trace));
    let gd_van = mean(van.iter().map(|r| (r.gd_trace - 1.0).abs()));
    let gd_full = mean(full.iter().map(|r| (r.gd_trace - 1.0).abs()));
    let auc_van = mean(van.iter().map(|r| r.auc));
    let auc_full = mean(full.iter().map(|r| r.auc));
    let if_red = 1.0 - if_full / if_van;
    let gd_red = 1.0 - gd_full / gd_van;
    let drop = auc_van - auc_full;
    let parts = [
        (if_red >= 0.5, format!("IF {if_van:.1} -> {if_full:.1} ({:.0}% reduction)", 100.0 * if_red)),
        (gd_red >= 0.5, format!("|GD-1| {gd_van:.3} -> {gd_full:.3} ({:.0}% reduction)", 100.0 * gd_red)),
        (drop <= 0.05, format!("AUC {auc_van:.3} -> {auc_full:.3}")),
    ];
    let pass = parts.iter().all(|p| p.0);
    let detail = parts
        .iter()
        .map(|(ok, s)| format!("{s} {}", if *ok { "ok" } else { "MISSED" }))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(pass, detail)
}

fn gradnorm_criterion(bench: &[SeedRuns]) -> Outcome {
    let mut s = WeightState::new(gradnorm::DEFAULT_BETA_LR);
    let identity = gradnorm::gradnorm_step(&mut s, [0.37; 3], [0.8; 3]) == [1.0; 3];

    let mut invariant_ok = true;
    for b in bench {
        for row in &b.runs["full"].log {
            let beta = [row.beta1, row.beta2, row.beta3];
            if (beta.iter().sum::<f64>() - 3.0).abs() > 1e-9 || beta.iter().any(|&x| x <= 0.0) {
                invariant_ok = false;
            }
        }
        let fb = b.runs["full"].final_beta;
        if (fb.iter().sum::<f64>() - 3.0).abs() > 1e-9 || fb.iter().any(|&x| x <= 0.0) {
            invariant_ok = false;
        }
    }
    let wins: Vec<bool> = bench
        .iter()
        .map(|b| b.runs["full"].report.if_trace <= b.runs["fixed"].report.if_trace)
        .collect();
    let n_wins = wins.iter().filter(|&&w| w).count();
    let ifs: Vec<String> = bench
        .iter()
        .map(|b| format!("{:.0}/{:.0}", b.runs["full"].report.if_trace, b.runs["fixed"].report.if_trace))
        .collect();
    let pass = identity && invariant_ok && n_wins >= 4;
    outcome(
        pass,
        format!(
            "identity update {identity}; sum=3 and beta>0 every epoch {invariant_ok}; GradNorm IF <= fixed in {n_wins}/5 seeds (on/off: {})",
            ifs.join(", ")
        ),
    )
}

fn ablations(bench: &mut [SeedRuns]) -> Outcome {
    for (b, &seed) in bench.iter_mut().zip(&SEEDS) {
        for name in ["attention-off", "no-group", "no-individual"] {
            ensure(b, seed, name);
        }
    }
    let count = |f: &dyn Fn(&SeedRuns) -> bool| bench.iter().filter(|b| f(b)).count();
    let att = count(&|b| b.runs["full"].report.if_trace <= b.runs["attention-off"].report.if_trace);
    let grp = count(&|b| {
        (b.runs["no-group"].report.gd_trace - 1.0).abs() > (b.runs["full"].report.gd_trace - 1.0).abs()
    });
    let ind = count(&|b| b.runs["no-individual"].report.if_trace > b.runs["full"].report.if_trace);
    let pass = att >= 4 && grp >= 4 && ind >= 4;
    let mark = |k: usize| if k >= 4 { "ok" } else { "MISSED" };
    outcome(
        pass,
        format!(
            "attention-on IF <= off {att}/5 {}; no-group GD farther from 1 {grp}/5 {}; no-individual IF higher {ind}/5 {}",
            mark(att),
            mark(grp),
            mark(ind)
        ),
    )
}

// ---------------------------------------------------------------- 12

fn harness_contracts() -> Outcome {
    let spec = base_config().sbm;
    let mut problems = Vec::new();
    let mut raised = 0;
    for seed in 0..10 {
        let g = sbm_generate(&spec, seed).unwrap();
        let (g0, _) = rewire_homophily(&g, 0.0, seed).unwrap();
        let (g8, _) = rewire_homophily(&g, 0.8, seed).unwrap();
        if g0.edges().len() != g.edges().len() || g8.edges().len() != g.edges().len() {
            problems.push(format!("seed {seed}: edge count changed"));
        }
        if same_label_fraction(&g8) > same_label_fraction(&g0) {
            raised += 1;
        }
    }
    if raised != 10 {
        problems.push(format!("same-label fraction rose in {raised}/10 seeds"));
    }

    let x = Tensor::zeros(500, 200);
    let mut worst_std: f64 = 0.0;
    for sigma in [0.1, 1.0, 3.0] {
        let noisy = perturb_noise(&x, sigma, 17).unwrap();
        let d = noisy.data();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
        worst_std = worst_std.max((sd - sigma).abs() / sigma);
    }
    if worst_std > 0.05 {
        problems.push(format!("noise std off by {:.1}%", 100.0 * worst_std));
    }

    let cfg = base_config();
    let logs: Vec<String> = (0..2)
        .map(|_| {
            let g = sbm_generate(&cfg.sbm, 11).unwrap();
            let p = prepare(g, &cfg, 11).unwrap();
            let mut t = cfg.train.clone();
            t.seed = 11;
            let res = trainer::train(&p.graph, &p.similarity, &p.partition, &t).unwrap();
            res.log
                .iter()
                .map(|r| {
                    [r.l1, r.l2, r.l3, r.beta1, r.beta2, r.beta3, r.val_auc, r.if_trace, r.gd]
                        .iter()
                        .map(|v| format!("{:016x}", v.to_bits()))
                        .collect::<String>()
                })
                .collect::<Vec<_>>()
                .join("\n")
        })
        .collect();
    if logs[0] != logs[1] {
        problems.push("logs differ between identical seeds".into());
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!("|E| preserved, homophily raised 10/10, noise std within {:.2}%, logs bitwise identical", 100.0 * worst_std)
        } else {
            problems.join("; ")
        },
    )
}

fn main() {
    // `cargo test -- --list` and filters: this target has a single entry.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut suite = Suite { failed: Vec::new() };
    suite.run(1, "Lipschitz fixture", 1.0, 0.0, lipschitz_fixture);
    suite.run(2, "trace identity", 5.0, 0.0, trace_identity);
    suite.run(3, "norm chain", 10.0, 0.0, norm_chain);
    suite.run(4, "gradient correctness", 120.0, 0.0, gradient_correctness);
    suite.run(5, "NSWP properties", 10.0, 0.0, nswp_properties);
    suite.run(6, "trace convexity", 5.0, 0.0, convexity);
    suite.run(7, "Markov tail bound", 5.0, 0.0, markov);
    suite.run(8, "metric invariants", 5.0, 0.0, metric_invariants);
    let mut bench = Vec::new();
    let t9 = suite.run(9, "synthetic benchmark", 25.0 * 60.0, 0.0, || synthetic_benchmark(&mut bench));
    suite.run(10, "GradNorm", 25.0 * 60.0, t9, || gradnorm_criterion(&bench));
    suite.run(11, "ablation directions", 30.0 * 60.0, 0.0, || ablations(&mut bench));
    suite.run(12, "harness contracts", 120.0, 0.0, harness_contracts);
    println!(
        "acceptance: {} of 12 criteria passed{}",
        12 - suite.failed.len(),
        if suite.failed.is_empty() {
            String::new()
        } else {
            format!("; failed: {:?}", suite.failed)
        }
    );
    if !suite.failed.is_empty() {
        std::process::exit(1);
    }
}
