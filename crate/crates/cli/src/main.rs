use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ginigraph::experiments::{
    self, config::parse_switch, emit_report, kmeans_elbow, perturb_noise, rewire_homophily, run::drop_columns,
    sbm_generate, GraphSource, Presentation, ReportFormat, RunConfig, RunRecord, SimilarityMode, SweepSpec,
};
use ginigraph::graph::{self, Graph, GroupPartition, LoadConfig};
use ginigraph::losses;
use ginigraph::metrics::{self, AuditInput, MetricsReport};
use ginigraph::models::{self, Attention, AttentionContext, Backbone};
use ginigraph::similarity::SimilaritySet;
use ginigraph::tensor::Tensor;
use ginigraph::trainer::{self, RunSummary};
use ginigraph::{Error, Result};

#[derive(Parser)]
#[command(name = "ginigraph", version, about = "Fairness-aware graph learning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a graph and write it back in normalised form.
    Ingest(IngestArgs),
    /// Build a similarity set.
    Similarity(SimilarityArgs),
    /// Generate a stochastic block model benchmark graph.
    GenerateSbm(GenerateArgs),
    /// Group nodes by k-means with the elbow rule.
    Cluster(ClusterArgs),
    /// Pretrain a backbone and train the fair layer.
    Train(TrainArgs),
    /// Compute the fairness metrics of an embedding matrix.
    Audit(AuditArgs),
    /// Rewire edges toward same-label endpoints or add feature noise.
    Perturb(PerturbArgs),
    /// Run a parameter grid.
    Sweep(SweepArgs),
    /// Collect run results into a CSV or JSON table.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct GraphArgs {
    /// Edge list, one `i j` pair per line.
    #[arg(long, requires = "features")]
    edges: Option<PathBuf>,
    /// Node CSV `id,label,sensitive,f0,...`.
    #[arg(long, requires = "edges")]
    features: Option<PathBuf>,
}

impl GraphArgs {
    /// The given graph, or a benchmark graph from the config.
    fn source(&self, cfg: &RunConfig) -> Result<GraphSource> {
        match (&self.edges, &self.features) {
            (Some(e), Some(f)) => Ok(GraphSource::Fixed(graph::load_graph(e, f, LoadConfig::default())?.0)),
            _ => Ok(GraphSource::Sbm(cfg.sbm.clone())),
        }
    }

    fn load(&self) -> Result<Graph> {
        match (&self.edges, &self.features) {
            (Some(e), Some(f)) => Ok(graph::load_graph(e, f, LoadConfig::default())?.0),
            _ => Err(Error::Config("--edges and --features are required".into())),
        }
    }
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    graph: GraphArgs,
    /// Expected node count.
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Topo,
    Attr,
}

#[derive(Args)]
struct SimilarityArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long, value_enum, default_value = "topo")]
    mode: ModeArg,
    #[arg(long, default_value_t = 100)]
    top_k: usize,
    /// Feature columns ignored by attribute similarity.
    #[arg(long, value_delimiter = ',')]
    sensitive_columns: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClusterArgs {
    /// Node CSV `id,label,sensitive,f0,...`.
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value_t = 10)]
    k_max: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Feature columns left out of the clustering.
    #[arg(long, value_delimiter = ',')]
    drop_columns: Vec<usize>,
    /// Output CSV `node,group`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    backbone: Option<Backbone>,
    /// on or off.
    #[arg(long)]
    gradnorm: Option<String>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    beta3: Option<f64>,
    /// none, softmax or topk.
    #[arg(long)]
    surrogate: Option<String>,
    /// on or off.
    #[arg(long)]
    attention: Option<String>,
    /// Group CSV `node,group` replacing the configured grouping.
    #[arg(long)]
    groups: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AuditArgs {
    /// Embedding CSV, one row per node.
    #[arg(long)]
    embeddings: PathBuf,
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Similarity CSV; built from the graph when absent.
    #[arg(long)]
    similarity: Option<PathBuf>,
    /// Score CSV with one probability per node.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    groups: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON report path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[group(required = true, multiple = false, id = "perturbation")]
struct PerturbKind {
    #[arg(long)]
    homophily: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct PerturbArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[command(flatten)]
    kind: PerturbKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    spec: PathBuf,
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Args)]
struct ReportArgs {
    /// Run summaries, sweep run records, report arrays, or directories of
    /// them.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    /// Show IF in thousands.
    #[arg(long)]
    thousands: bool,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => {
            let mut c = RunConfig::default();
            if let Some(s) = experiments::config::seed_override()? {
                c.train.seed = s;
            }
            c
        }
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn read_groups(path: &Path, n: usize) -> Result<GroupPartition> {
    let mut r = csv::Reader::from_path(path).map_err(Error::from)?;
    let mut group_of = vec![usize::MAX; n];
    for (k, rec) in r.deserialize::<(usize, usize)>().enumerate() {
        let (node, g) = rec.map_err(Error::from)?;
        if node >= n {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: k + 2,
                msg: format!("node {node} out of range for {n} nodes"),
            });
        }
        group_of[node] = g;
    }
    if let Some(missing) = group_of.iter().position(|&g| g == usize::MAX) {
        return Err(Error::Validation(format!("node {missing} has no group")));
    }
    GroupPartition::new(group_of)
}

fn write_groups(path: &Path, assignments: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
    w.write_record(["node", "group"]).map_err(Error::from)?;
    for (i, g) in assignments.iter().enumerate() {
        w.serialize((i, g)).map_err(Error::from)?;
    }
    w.flush()?;
    Ok(())
}

fn write_graph_dir(g: &Graph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    graph::write_graph(g, &dir.join("edges.txt"), &dir.join("nodes.csv"))
}

fn ingest(a: IngestArgs) -> Result<()> {
    let (Some(e), Some(f)) = (&a.graph.edges, &a.graph.features) else {
        return Err(Error::Config("--edges and --features are required".into()));
    };
    let (g, report) = graph::load_graph(e, f, LoadConfig { declared_nodes: a.nodes })?;
    write_graph_dir(&g, &a.out)?;
    println!(
        "nodes {} edges {} duplicates dropped {} labeled {}",
        g.n(),
        g.edges().len(),
        report.duplicate_edges,
        g.labeled_nodes().len()
    );
    Ok(())
}

fn similarity(a: SimilarityArgs) -> Result<()> {
    let g = a.graph.load()?;
    let cfg = RunConfig {
        similarity: match a.mode {
            ModeArg::Topo => SimilarityMode::Topo,
            ModeArg::Attr => SimilarityMode::Attr,
        },
        sensitive_columns: a.sensitive_columns,
        train: trainer::TrainConfig {
            top_k: a.top_k,
            ..Default::default()
        },
        ..Default::default()
    };
    let s = experiments::run::build_similarity(&g, &cfg)?;
    s.write_csv(&a.out)?;
    println!("pairs {}", s.len());
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), a.seed)?;
    let g = sbm_generate(&cfg.sbm, cfg.train.seed)?;
    write_graph_dir(&g, &a.out)?;
    println!("nodes {} edges {}", g.n(), g.edges().len());
    Ok(())
}

fn cluster(a: ClusterArgs) -> Result<()> {
    let (x, _, _) = graph::read_feature_file(&a.features)?;
    let x = drop_columns(&x, &a.drop_columns)?;
    let elbow = kmeans_elbow(&x, a.k_max, a.seed)?;
    write_groups(&a.out, &elbow.clustering.assignments)?;
    for (k, w) in elbow.wcss.iter().enumerate() {
        println!("k {} wcss {w}", k + 1);
    }
    println!("chosen k {}", elbow.k);
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), a.seed)?;
    let t = &mut cfg.train;
    if let Some(b) = a.backbone {
        t.backbone = b;
    }
    if let Some(v) = &a.gradnorm {
        t.gradnorm = parse_switch("--gradnorm", v)?;
    }
    if let Some(v) = a.beta2 {
        t.beta[1] = v;
    }
    if let Some(v) = a.beta3 {
        t.beta[2] = v;
    }
    if let Some(v) = &a.surrogate {
        t.surrogate = losses::parse_surrogate(v)?;
    }
    if let Some(v) = &a.attention {
        t.attention = if parse_switch("--attention", v)? { Attention::On } else { Attention::Off };
    }
    cfg.validate()?;
    let seed = cfg.train.seed;
    let g = a.graph.source(&cfg)?.graph(seed)?;
    let mut prepared = experiments::prepare(g, &cfg, seed)?;
    if let Some(p) = &a.groups {
        prepared.partition = read_groups(p, prepared.graph.n())?;
    }
    let result = experiments::run_prepared(&prepared, &cfg, seed)?;
    fs::create_dir_all(&a.out)?;
    result.write_log(&a.out.join("log.csv"))?;
    result.summary(&cfg.train).write_json(&a.out.join("summary.json"))?;
    result.model.checkpoint().write_checkpoint(&a.out.join("checkpoint.csv"))?;
    let ctx = AttentionContext::new(&prepared.graph, &prepared.similarity)?;
    let (h, logits) = result.model.forward(&ctx)?;
    h.write_csv(&a.out.join("embeddings.csv"), "h")?;
    Tensor::column(&models::probabilities(&logits)).write_csv(&a.out.join("scores.csv"), "p")?;
    let r = &result.report;
    println!(
        "epochs {} auc {:.4} f1 {:.4} if {:.4} gd {:.4} if_gini {:.4} gd_gini {:.4} eo {:.2} beta {:.4?}",
        result.log.len(),
        r.auc,
        r.f1,
        r.if_trace,
        r.gd_trace,
        r.if_gini,
        r.gd_gini,
        r.eo,
        result.final_beta
    );
    Ok(())
}

fn audit(a: AuditArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), a.seed)?;
    let z = Tensor::read_csv(&a.embeddings)?;
    let g = a.graph.source(&cfg)?.graph(cfg.train.seed)?;
    if z.rows() != g.n() {
        return Err(Error::Validation(format!("{} embedding rows for {} nodes", z.rows(), g.n())));
    }
    let s = match &a.similarity {
        Some(p) => SimilaritySet::read_csv(p, g.n())?,
        None => experiments::run::build_similarity(&g, &cfg)?,
    };
    let partition = match &a.groups {
        Some(p) => read_groups(p, g.n())?,
        None => experiments::run::build_partition(&g, &cfg, cfg.train.seed)?,
    };
    let scores = a.scores.as_deref().map(Tensor::read_csv).transpose()?;
    let (scores, labels): (Option<Vec<f64>>, Option<Vec<u8>>) = match scores {
        Some(t) => {
            if t.rows() != g.n() || t.cols() != 1 {
                return Err(Error::Validation("scores must be one column with a row per node".into()));
            }
            let labels = g
                .labels
                .iter()
                .map(|l| l.ok_or_else(|| Error::Validation("scores given but some nodes are unlabeled".into())))
                .collect::<Result<_>>()?;
            (Some(t.into_data()), Some(labels))
        }
        None => (None, None),
    };
    let report = metrics::audit(AuditInput {
        embeddings: &z,
        similarity: &s,
        partition: &partition,
        scores: scores.as_deref(),
        labels: labels.as_deref(),
        eo_threshold: cfg.train.eo_threshold,
    })?;
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    match &a.out {
        Some(p) => fs::write(p, json + "\n")?,
        None => writeln!(std::io::stdout(), "{json}")?,
    }
    Ok(())
}

fn perturb(a: PerturbArgs) -> Result<()> {
    let g = a.graph.load()?;
    let out = match (a.kind.homophily, a.kind.noise) {
        (Some(rho), _) => {
            let before = experiments::same_label_fraction(&g);
            let (h, r) = rewire_homophily(&g, rho, a.seed)?;
            println!(
                "selected {} rewired {} no candidate {} exhausted {} same-label fraction {before:.4} -> {:.4}",
                r.selected,
                r.rewired,
                r.no_candidate,
                r.exhausted,
                experiments::same_label_fraction(&h)
            );
            h
        }
        (None, Some(sigma)) => {
            let mut h = g.clone();
            h.features = perturb_noise(&g.features, sigma, a.seed)?;
            h
        }
        (None, None) => unreachable!("clap requires one perturbation"),
    };
    write_graph_dir(&out, &a.out)
}

fn sweep(a: SweepArgs) -> Result<()> {
    let spec = SweepSpec::load(&a.spec)?;
    let source = a.graph.source(&spec.base)?;
    fs::create_dir_all(&a.out)?;
    let table = experiments::run_sweep(&source, &spec, Some(&a.out.join("runs")), a.threads)?;
    table.write_csv(&a.out.join("table.csv"))?;
    table.write_frontier_csv(&a.out.join("frontier.csv"))?;
    let failures: usize = table.rows.iter().map(|r| r.failures).sum();
    println!("points {} runs {} failures {failures}", table.rows.len(), table.records.len());
    Ok(())
}

/// Every report held in one JSON file.
fn reports_in(path: &Path) -> Result<Vec<MetricsReport>> {
    let bytes = fs::read(path)?;
    if let Ok(s) = serde_json::from_slice::<RunSummary>(&bytes) {
        return Ok(vec![s.report]);
    }
    if let Ok(r) = serde_json::from_slice::<RunRecord>(&bytes) {
        return Ok(r.report.into_iter().collect());
    }
    serde_json::from_slice::<Vec<MetricsReport>>(&bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: "not a run summary, run record or report array".into(),
    })
}

/// JSON files under `dir`, searched recursively, in path order.
fn json_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            json_files(&p, out)?;
        } else if p.extension().is_some_and(|e| e == "json") {
            out.push(p);
        }
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let mut files = Vec::new();
    for p in &a.input {
        if p.is_dir() {
            json_files(p, &mut files)?;
        } else {
            files.push(p.clone());
        }
    }
    let mut all = Vec::new();
    for f in &files {
        all.extend(reports_in(f)?);
    }
    let format = match a.format {
        FormatArg::Csv => ReportFormat::Csv,
        FormatArg::Json => ReportFormat::Json,
    };
    let presentation = if a.thousands { Presentation::Thousands } else { Presentation::Raw };
    emit_report(&all, format, presentation, &a.out)?;
    println!("rows {}", all.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Similarity(a) => similarity(a),
        Command::GenerateSbm(a) => generate(a),
        Command::Cluster(a) => cluster(a),
        Command::Train(a) => train(a),
        Command::Audit(a) => audit(a),
        Command::Perturb(a) => perturb(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
