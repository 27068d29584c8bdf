//! Two-phase training.
//!
//! [`pretrain`] fits the backbone and a linear head on the utility loss
//! alone. [`train_from`] then freezes the backbone, feeds its embeddings to
//! the attention layer and fits that layer (with its own head) under
//! `beta_1 L_1 + beta_2 L_2 + beta_3 L_3`, adapting the weights with
//! [`crate::gradnorm`] unless they are fixed. Training stops after
//! `max_epochs` or once validation AUC has not improved for `patience`
//! epochs; the final-epoch parameters are kept.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, NodeId, Tape};
use crate::error::{Error, Result};
use crate::gradnorm::{self, WeightState};
use crate::graph::{Graph, GroupPartition};
use crate::losses::{self, GroupContext, LossBundle, Surrogate};
use crate::metrics::{self, AuditInput, GroupMetricKind, MetricsReport};
use crate::models::{self, Attention, AttentionContext, Backbone, BackboneShape, Bound, Params, Propagation};
use crate::similarity::{self, SimilaritySet};
use crate::tensor::Tensor;

/// Which fair-layer tensors the gradient norms are taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormScope {
    /// The attention layer's weight matrix only.
    #[default]
    Shared,
    /// Every fair-layer parameter.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub backbone: Backbone,
    pub hidden: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub max_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub seed: u64,
    pub delta: f64,
    pub top_k: usize,
    pub gradnorm: bool,
    /// Fixed weights, or starting weights under GradNorm. A zero disables
    /// its term.
    pub beta: [f64; 3],
    pub beta_lr: f64,
    pub norm_scope: NormScope,
    /// Replaces the trace term when set.
    pub surrogate: Option<Surrogate>,
    pub attention: Attention,
    pub eo_threshold: f64,
    /// Keep the pretrained backbone fixed during fair training.
    pub freeze_backbone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            backbone: Backbone::Gcn,
            hidden: models::DEFAULT_HIDDEN,
            pretrain_epochs: 200,
            pretrain_lr: 0.01,
            max_epochs: 1000,
            lr: 1e-3,
            weight_decay: 1e-5,
            patience: 100,
            seed: 0,
            delta: similarity::DEFAULT_DELTA,
            top_k: similarity::DEFAULT_TOP_K,
            gradnorm: true,
            beta: [1.0; 3],
            beta_lr: gradnorm::DEFAULT_BETA_LR,
            norm_scope: NormScope::Shared,
            surrogate: None,
            attention: Attention::On,
            eo_threshold: metrics::DEFAULT_EO_THRESHOLD,
            freeze_backbone: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.hidden == 0 || self.max_epochs == 0 || self.patience == 0 || self.top_k == 0 {
            return bad("hidden, max_epochs, patience and top_k must be positive".into());
        }
        for (name, v) in [("lr", self.lr), ("pretrain_lr", self.pretrain_lr), ("beta_lr", self.beta_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be positive"));
            }
        }
        if !(self.weight_decay >= 0.0) || !(self.delta >= 0.0) {
            return bad("weight_decay and delta must be non-negative".into());
        }
        if self.beta.iter().any(|b| !(b.is_finite() && *b >= 0.0)) || self.beta[0] <= 0.0 {
            return bad(format!("beta {:?}: utility weight must be positive, others non-negative", self.beta));
        }
        Ok(())
    }
}

/// AdamW: bias-corrected moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Updates every parameter that has a gradient in `grads`.
    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::dim("optimizer", format!("gradient {:?} for '{name}' {:?}", g.shape(), p.shape())));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.rows(), g.cols()), Tensor::zeros(g.rows(), g.cols())));
            for k in 0..g.len() {
                let gk = g.data()[k];
                let mk = self.beta1 * m.data()[k] + (1.0 - self.beta1) * gk;
                let vk = self.beta2 * v.data()[k] + (1.0 - self.beta2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let update = (mk / c1) / ((vk / c2).sqrt() + self.eps);
                let w = &mut p.data_mut()[k];
                *w -= self.lr * (update + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}

/// One optimiser update with the configured step size and weight decay.
pub fn optimizer_step(
    optimizer: &mut AdamW,
    params: &mut Params,
    grads: &BTreeMap<String, Tensor>,
) -> Result<()> {
    optimizer.step(params, grads)
}

fn collect_grads(bound: &Bound, grads: &Gradients) -> BTreeMap<String, Tensor> {
    bound
        .iter()
        .filter_map(|(name, id)| grads.get(id).map(|g| (name.to_string(), g.clone())))
        .collect()
}

fn labelled(graph: &Graph, nodes: &[usize]) -> Result<Vec<(usize, u8)>> {
    nodes
        .iter()
        .map(|&i| {
            graph.labels[i]
                .map(|y| (i, y))
                .ok_or_else(|| Error::Validation(format!("masked node {i} has no label")))
        })
        .collect()
}

fn check_finite(epoch: usize, phase: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{phase} epoch {epoch}: non-finite loss {values:?}")))
    }
}

fn auc_on(logits: &Tensor, targets: &[(usize, u8)]) -> f64 {
    let scores: Vec<f64> = targets.iter().map(|&(i, _)| logits.data()[i]).collect();
    let labels: Vec<u8> = targets.iter().map(|t| t.1).collect();
    metrics::auc(&scores, &labels).unwrap_or(f64::NAN)
}

/// Backbone parameters after pretraining and the embeddings they produce.
#[derive(Debug, Clone, PartialEq)]
pub struct Pretrained {
    pub kind: Backbone,
    pub params: Params,
    pub embeddings: Tensor,
}

impl Pretrained {
    /// Test AUC of the backbone with its pretraining head.
    pub fn test_auc(&self, graph: &Graph) -> Result<f64> {
        let mut tape = Tape::untraced();
        let z = tape.constant(self.embeddings.clone());
        let b = self.params.bind(&mut tape, false);
        let logits = models::linear_head(&mut tape, z, b.id("pretrain.head.w")?, b.id("pretrain.head.b")?)?;
        Ok(auc_on(tape.value(logits), &labelled(graph, &graph.masks.test)?))
    }
}

/// Fits the backbone and its head on the training labels.
pub fn pretrain(graph: &Graph, config: &TrainConfig) -> Result<Pretrained> {
    config.validate()?;
    let targets = labelled(graph, &graph.masks.train)?;
    if targets.is_empty() {
        return Err(Error::Contract("pretraining needs a non-empty training mask".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let shape = BackboneShape {
        kind: config.backbone,
        input: graph.features.cols(),
        hidden: config.hidden,
        output: config.hidden,
    };
    let mut params = models::init_backbone(shape, &mut rng);
    let prop = Propagation::new(graph);
    let mut opt = AdamW::new(config.pretrain_lr, config.weight_decay);
    for epoch in 0..config.pretrain_epochs {
        let mut tape = Tape::new();
        let x = tape.constant(graph.features.clone());
        let b = params.bind(&mut tape, true);
        let z = models::backbone_forward(&mut tape, &prop, x, &b, config.backbone)?;
        let logits = models::linear_head(&mut tape, z, b.id("pretrain.head.w")?, b.id("pretrain.head.b")?)?;
        let loss = losses::utility_loss(&mut tape, logits, &targets)?;
        check_finite(epoch, "pretrain", &[tape.value(loss).item()])?;
        let grads = tape.backward(loss)?;
        opt.step(&mut params, &collect_grads(&b, &grads))?;
        if !params.is_finite() {
            return Err(Error::Numerical(format!("pretrain epoch {epoch}: parameters diverged")));
        }
    }
    let embeddings = models::embed(graph, &prop, &params, config.backbone)?;
    Ok(Pretrained {
        kind: config.backbone,
        params,
        embeddings,
    })
}

/// Everything needed to run the fair layer forward.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub pretrained: Pretrained,
    pub fair: Params,
    pub attention: Attention,
}

impl TrainedModel {
    /// Fair embeddings and logits for every node.
    pub fn forward(&self, ctx: &AttentionContext) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::untraced();
        let z = tape.constant(self.pretrained.embeddings.clone());
        let b = self.fair.bind(&mut tape, false);
        let h = models::fair_layer_forward(&mut tape, ctx, z, &b, self.attention)?;
        let logits = models::linear_head(&mut tape, h, b.id("fair.head.w")?, b.id("fair.head.b")?)?;
        Ok((tape.value(h).clone(), tape.value(logits).clone()))
    }

    /// Backbone and fair-layer parameters in one map.
    pub fn checkpoint(&self) -> Params {
        let mut p = self.pretrained.params.clone();
        p.extend(self.fair.clone());
        p
    }
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub val_auc: f64,
    /// Trace on the test rows.
    pub if_trace: f64,
    /// Trace disparity between test groups.
    pub gd: f64,
}

pub const LOG_HEADER: [&str; 10] = ["epoch", "l1", "l2", "l3", "beta1", "beta2", "beta3", "val_auc", "if", "gd"];

#[derive(Debug, Clone)]
pub struct RunResult {
    pub report: MetricsReport,
    pub log: Vec<LogRow>,
    pub model: TrainedModel,
    pub final_beta: [f64; 3],
    pub stopped_early: bool,
    pub seconds: f64,
}

impl RunResult {
    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(LOG_HEADER)?;
        for r in &self.log {
            w.serialize((
                r.epoch, r.l1, r.l2, r.l3, r.beta1, r.beta2, r.beta3, r.val_auc, r.if_trace, r.gd,
            ))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self, config: &TrainConfig) -> RunSummary {
        RunSummary {
            config: config.clone(),
            seed: config.seed,
            epochs: self.log.len(),
            stopped_early: self.stopped_early,
            final_beta: self.final_beta,
            report: self.report.clone(),
            seconds: self.seconds,
        }
    }
}

/// JSON summary of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: TrainConfig,
    pub seed: u64,
    pub epochs: usize,
    pub stopped_early: bool,
    pub final_beta: [f64; 3],
    pub report: MetricsReport,
    pub seconds: f64,
}

impl RunSummary {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

/// Test-mask evaluation data prepared once per run.
struct TestView {
    nodes: Vec<usize>,
    targets: Vec<(usize, u8)>,
    similarity: SimilaritySet,
    partition: Option<GroupPartition>,
}

impl TestView {
    fn new(graph: &Graph, s: &SimilaritySet, partition: &GroupPartition) -> Result<Self> {
        let nodes = graph.masks.test.clone();
        if nodes.is_empty() {
            return Err(Error::Contract("evaluation needs a non-empty test mask".into()));
        }
        Ok(TestView {
            targets: labelled(graph, &nodes)?,
            similarity: s.induced(&nodes),
            partition: partition.restrict(&nodes).ok(),
            nodes,
        })
    }

    fn fairness(&self, h: &Tensor) -> Result<(f64, f64)> {
        let ht = h.select_rows(&self.nodes)?;
        let tr = metrics::trace_if(&ht, &self.similarity)?;
        let gd = match &self.partition {
            Some(p) if p.num_groups() >= 2 => {
                let v: Vec<f64> = metrics::group_metric(&ht, &self.similarity, p, GroupMetricKind::Trace)?
                    .into_iter()
                    .flatten()
                    .collect();
                metrics::a_gdif(&v).unwrap_or(1.0)
            }
            _ => 1.0,
        };
        Ok((tr, gd))
    }

    fn report(&self, h: &Tensor, logits: &Tensor, eo_threshold: f64) -> Result<MetricsReport> {
        let ht = h.select_rows(&self.nodes)?;
        let scores: Vec<f64> = models::probabilities(&logits.select_rows(&self.nodes)?);
        let labels: Vec<u8> = self.targets.iter().map(|t| t.1).collect();
        let single = GroupPartition::new(vec![0; self.nodes.len()])?;
        metrics::audit(AuditInput {
            embeddings: &ht,
            similarity: &self.similarity,
            partition: self.partition.as_ref().unwrap_or(&single),
            scores: Some(&scores),
            labels: Some(&labels),
            eo_threshold,
        })
    }
}

/// Metrics of a trained model on the test mask: prediction metrics from its
/// scores, fairness metrics from the fair embeddings of the test nodes and
/// the similarity and groups induced on them.
pub fn evaluate(
    model: &TrainedModel,
    graph: &Graph,
    s: &SimilaritySet,
    partition: &GroupPartition,
    eo_threshold: f64,
) -> Result<MetricsReport> {
    let ctx = AttentionContext::new(graph, s)?;
    let (h, logits) = model.forward(&ctx)?;
    TestView::new(graph, s, partition)?.report(&h, &logits, eo_threshold)
}

/// Pretrains, then trains the fair layer.
pub fn train(graph: &Graph, s: &SimilaritySet, partition: &GroupPartition, config: &TrainConfig) -> Result<RunResult> {
    let pre = pretrain(graph, config)?;
    train_from(graph, s, partition, config, &pre)
}

/// Records the fair layer, its head and the three losses on `tape`.
pub struct FairForward {
    pub embeddings: NodeId,
    pub logits: NodeId,
    pub losses: LossBundle,
}

/// Inputs to the fair-phase objective that do not change across epochs.
pub struct Objective {
    pub attention: AttentionContext,
    pub similarity: Arc<SimilaritySet>,
    pub pairs: Arc<Vec<(usize, usize)>>,
    pub groups: Option<GroupContext>,
    pub train_targets: Vec<(usize, u8)>,
    pub surrogate: Option<Surrogate>,
    pub mode: Attention,
}

impl Objective {
    pub fn new(
        graph: &Graph,
        s: &SimilaritySet,
        partition: &GroupPartition,
        surrogate: Option<Surrogate>,
        mode: Attention,
    ) -> Result<Self> {
        let groups = if partition.num_groups() < 2 {
            log::warn!("fewer than two groups; group loss disabled");
            None
        } else {
            let g = GroupContext::new(s, partition)?;
            let degenerate = g.degenerate_groups();
            if degenerate.is_empty() {
                Some(g)
            } else {
                log::warn!("groups {degenerate:?} have no internal similarity; group loss disabled");
                None
            }
        };
        Ok(Objective {
            attention: AttentionContext::new(graph, s)?,
            similarity: Arc::new(s.clone()),
            pairs: Arc::new(s.support_pairs()),
            groups,
            train_targets: labelled(graph, &graph.masks.train)?,
            surrogate,
            mode,
        })
    }

    pub fn forward(&self, tape: &mut Tape, z: NodeId, fair: &Bound) -> Result<FairForward> {
        let h = models::fair_layer_forward(tape, &self.attention, z, fair, self.mode)?;
        let logits = models::linear_head(tape, h, fair.id("fair.head.w")?, fair.id("fair.head.b")?)?;
        let utility = losses::utility_loss(tape, logits, &self.train_targets)?;
        let individual = match self.surrogate {
            None => losses::individual_fairness_loss(tape, h, &self.similarity)?,
            Some(mode) if self.pairs.is_empty() => {
                log::warn!("no similarity pairs for the {mode:?} surrogate");
                tape.constant(Tensor::scalar(0.0))
            }
            Some(mode) => losses::surrogate_if_loss(tape, h, &self.pairs, mode)?,
        };
        let group = match &self.groups {
            Some(g) => losses::group_fairness_loss(tape, h, g)?,
            None => tape.constant(Tensor::scalar(0.0)),
        };
        Ok(FairForward {
            embeddings: h,
            logits,
            losses: LossBundle { utility, individual, group },
        })
    }
}

/// Fair-layer training on top of an already pretrained backbone.
pub fn train_from(
    graph: &Graph,
    s: &SimilaritySet,
    partition: &GroupPartition,
    config: &TrainConfig,
    pre: &Pretrained,
) -> Result<RunResult> {
    config.validate()?;
    let start = Instant::now();
    if pre.kind != config.backbone {
        return Err(Error::Config(format!(
            "pretrained {} backbone for a {} run",
            pre.kind, config.backbone
        )));
    }
    let objective = Objective::new(graph, s, partition, config.surrogate, config.attention)?;
    let mut beta_init = config.beta;
    if objective.groups.is_none() {
        beta_init[2] = 0.0;
    }
    let mut weights = if config.gradnorm {
        Some(WeightState::with_initial(beta_init, config.beta_lr)?)
    } else {
        None
    };
    let val_targets = labelled(graph, &graph.masks.val)?;
    let test = TestView::new(graph, s, partition)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let head = (pre.params.get("pretrain.head.w")?, pre.params.get("pretrain.head.b")?);
    let mut fair = models::init_fair(config.hidden, Some(head), &mut rng);
    let mut opt = AdamW::new(config.lr, config.weight_decay);
    let mut backbone = pre.params.clone();
    let mut backbone_opt = AdamW::new(config.lr, config.weight_decay);
    let prop = Propagation::new(graph);

    let mut log_rows = Vec::new();
    let mut best_auc = f64::NEG_INFINITY;
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 0..config.max_epochs {
        let mut tape = Tape::new();
        let (z, backbone_bound) = if config.freeze_backbone {
            (tape.constant(pre.embeddings.clone()), None)
        } else {
            let x = tape.constant(graph.features.clone());
            let b = backbone.bind(&mut tape, true);
            (models::backbone_forward(&mut tape, &prop, x, &b, config.backbone)?, Some(b))
        };
        let bound = fair.bind(&mut tape, true);
        let out = objective.forward(&mut tape, z, &bound)?;
        let terms = out.losses.terms();
        let values = terms.map(|t| tape.value(t).item());
        check_finite(epoch, "fair", &values)?;
        let beta = match &mut weights {
            Some(w) => {
                w.record_initial(values);
                w.beta()
            }
            None => beta_init,
        };
        let active = beta.map(|b| b > 0.0);
        // Disabled terms get a parameter-free root so their gradients are
        // empty.
        let none = tape.constant(Tensor::scalar(0.0));
        let roots = [0, 1, 2].map(|k| if active[k] { terms[k] } else { none });
        let grads: [Gradients; 3] = [
            tape.backward(roots[0])?,
            tape.backward(roots[1])?,
            tape.backward(roots[2])?,
        ];
        let total = weighted_sum(&bound, &grads, beta)?;

        let h = tape.value(out.embeddings);
        let (if_trace, gd) = test.fairness(h)?;
        let val_auc = auc_on(tape.value(out.logits), &val_targets);
        log_rows.push(LogRow {
            epoch,
            l1: values[0],
            l2: values[1],
            l3: values[2],
            beta1: beta[0],
            beta2: beta[1],
            beta3: beta[2],
            val_auc,
            if_trace,
            gd,
        });

        if let Some(w) = &mut weights {
            let shared: Vec<NodeId> = match config.norm_scope {
                NormScope::Shared => vec![bound.id("fair.w")?],
                NormScope::All => bound.iter().map(|(_, id)| id).collect(),
            };
            let norms = gradnorm::grad_norms_from(&grads, &shared, beta);
            let ratios = gradnorm::loss_ratios(values, w.initial_losses().unwrap_or(values));
            gradnorm::gradnorm_step(w, norms.raw, ratios);
        }
        opt.step(&mut fair, &total)?;
        if let Some(b) = &backbone_bound {
            backbone_opt.step(&mut backbone, &weighted_sum(b, &grads, beta)?)?;
        }
        if !fair.is_finite() || !backbone.is_finite() {
            return Err(Error::Numerical(format!("fair epoch {epoch}: parameters diverged")));
        }

        if val_auc > best_auc {
            best_auc = val_auc;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let embeddings = if config.freeze_backbone {
        pre.embeddings.clone()
    } else {
        models::embed(graph, &prop, &backbone, config.backbone)?
    };
    let model = TrainedModel {
        pretrained: Pretrained {
            kind: pre.kind,
            params: backbone,
            embeddings,
        },
        fair,
        attention: config.attention,
    };
    let (h, logits) = model.forward(&objective.attention)?;
    let report = test.report(&h, &logits, config.eo_threshold)?;
    Ok(RunResult {
        report,
        log: log_rows,
        final_beta: weights.map_or(beta_init, |w| w.beta()),
        model,
        stopped_early,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// `sum_k beta_k dL_k/dp` for every parameter `p` of `bound`.
fn weighted_sum(bound: &Bound, grads: &[Gradients; 3], beta: [f64; 3]) -> Result<BTreeMap<String, Tensor>> {
    let mut total: BTreeMap<String, Tensor> = BTreeMap::new();
    for (k, g) in grads.iter().enumerate() {
        if beta[k] == 0.0 {
            continue;
        }
        for (name, t) in collect_grads(bound, g) {
            match total.get_mut(&name) {
                Some(acc) => acc.axpy(beta[k], &t)?,
                None => {
                    total.insert(name, t.scale(beta[k]));
                }
            }
        }
    }
    Ok(total)
}
