//! Backbones and the similarity-reinforced attention layer.
//!
//! Parameters live in a [`Params`] map keyed by name. A forward pass first
//! binds the map onto a [`Tape`] (as leaves when gradients are wanted, as
//! constants otherwise) and then records the network on that tape.
//!
//! The attention layer computes, for each node `i` and each `j` in its
//! neighbourhood (itself included),
//!
//! ```text
//! alpha_ij = softmax_j( LeakyReLU(a^T [W h_i || W h_j]) * S[i,j] )
//! h'_i     = ELU( sum_j alpha_ij W h_j )
//! ```
//!
//! with `S[i,i] = 1`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{IndexSets, NodeId, Tape};
use crate::error::{Error, Result};
use crate::graph::{Csr, Graph};
use crate::similarity::SimilaritySet;
use crate::tensor::{self, Tensor};

pub const DEFAULT_HIDDEN: usize = 16;
pub const LEAKY_SLOPE: f64 = 0.2;
const CHECKPOINT_MAGIC: &str = "ginigraph-checkpoint";
const CHECKPOINT_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    #[default]
    Gcn,
    Gin,
    Jk,
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::Gcn => "gcn",
            Backbone::Gin => "gin",
            Backbone::Jk => "jk",
        })
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(Backbone::Gcn),
            "gin" => Ok(Backbone::Gin),
            "jk" => Ok(Backbone::Jk),
            other => Err(Error::Config(format!("unknown backbone '{other}'"))),
        }
    }
}

/// Named parameter tensors in a fixed (sorted) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    tensors: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    /// Adds every tensor of `other`, replacing same-named entries.
    pub fn extend(&mut self, other: Params) {
        self.tensors.extend(other.tensors);
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Puts every tensor on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let ids = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let id = if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), id)
            })
            .collect();
        Bound { ids }
    }

    /// Writes a checkpoint: a version line, then one CSV record per tensor
    /// holding `name,rows,cols` followed by the row-major values.
    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_path(path)?;
        w.write_record([CHECKPOINT_MAGIC, CHECKPOINT_VERSION])?;
        for (name, t) in &self.tensors {
            let mut rec = vec![name.clone(), t.rows().to_string(), t.cols().to_string()];
            rec.extend(t.data().iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint(path: &Path) -> Result<Params> {
        let mut r = csv::ReaderBuilder::new()
            .flexible(true)
            .has_headers(false)
            .from_path(path)?;
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut records = r.records();
        match records.next() {
            Some(Ok(h)) if h.len() == 2 && &h[0] == CHECKPOINT_MAGIC && &h[1] == CHECKPOINT_VERSION => {}
            Some(Ok(h)) => return Err(parse_err(1, format!("unsupported checkpoint header {h:?}"))),
            Some(Err(e)) => return Err(e.into()),
            None => return Err(parse_err(1, "empty checkpoint".into())),
        }
        let mut out = Params::new();
        for (k, rec) in records.enumerate() {
            let rec = rec?;
            let line = k + 2;
            if rec.len() < 3 {
                return Err(parse_err(line, "expected name,rows,cols,values".into()));
            }
            let dim = |s: &str| s.parse::<usize>().map_err(|e| parse_err(line, format!("bad size '{s}': {e}")));
            let (rows, cols) = (dim(&rec[1])?, dim(&rec[2])?);
            let values = rec
                .iter()
                .skip(3)
                .map(|s| s.parse::<f64>().map_err(|e| parse_err(line, format!("bad value '{s}': {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(rows, cols, values).map_err(|e| parse_err(line, e.to_string()))?;
            out.insert(&rec[0], t);
        }
        Ok(out)
    }
}

/// Tape handles of a bound [`Params`].
#[derive(Debug, Clone)]
pub struct Bound {
    ids: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter '{name}' is not bound")))
    }

    /// Points `name` at another node, e.g. a leaf under test.
    pub fn set(&mut self, name: impl Into<String>, id: NodeId) {
        self.ids.insert(name.into(), id);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Shapes of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneShape {
    pub kind: Backbone,
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

/// Glorot-initialised backbone weights plus a linear head used during
/// pretraining. GIN's `eps` starts at zero.
pub fn init_backbone<R: Rng + ?Sized>(shape: BackboneShape, rng: &mut R) -> Params {
    let BackboneShape { kind, input: d, hidden: h, output: c } = shape;
    let mut p = Params::new();
    match kind {
        Backbone::Gcn => {
            p.insert("gcn.w1", Tensor::glorot(d, h, rng));
            p.insert("gcn.w2", Tensor::glorot(h, c, rng));
        }
        Backbone::Gin => {
            p.insert("gin.eps1", Tensor::scalar(0.0));
            p.insert("gin.eps2", Tensor::scalar(0.0));
            p.insert("gin.mlp1.w1", Tensor::glorot(d, DEFAULT_HIDDEN, rng));
            p.insert("gin.mlp1.w2", Tensor::glorot(DEFAULT_HIDDEN, h, rng));
            p.insert("gin.mlp2.w1", Tensor::glorot(h, DEFAULT_HIDDEN, rng));
            p.insert("gin.mlp2.w2", Tensor::glorot(DEFAULT_HIDDEN, c, rng));
        }
        Backbone::Jk => {
            p.insert("jk.w1", Tensor::glorot(d, h, rng));
            p.insert("jk.w2", Tensor::glorot(h, h, rng));
            p.insert("jk.proj", Tensor::glorot(2 * h, c, rng));
        }
    }
    p.insert("pretrain.head.w", Tensor::glorot(c, 1, rng));
    p.insert("pretrain.head.b", Tensor::scalar(0.0));
    p
}

/// Fair layer on `c`-wide embeddings: `fair.w` starts at the identity,
/// `fair.a` small, and the readout head copies `head` when given.
pub fn init_fair<R: Rng + ?Sized>(c: usize, head: Option<(&Tensor, &Tensor)>, rng: &mut R) -> Params {
    let mut p = Params::new();
    p.insert("fair.w", Tensor::identity(c));
    p.insert("fair.a", Tensor::glorot(2 * c, 1, rng).scale(0.1));
    match head {
        Some((w, b)) => {
            p.insert("fair.head.w", w.clone());
            p.insert("fair.head.b", b.clone());
        }
        None => {
            p.insert("fair.head.w", Tensor::glorot(c, 1, rng));
            p.insert("fair.head.b", Tensor::scalar(0.0));
        }
    }
    p
}

/// Precomputed message-passing structure of a graph.
#[derive(Debug, Clone)]
pub struct Propagation {
    /// Adjacency with self-loops and its symmetric normalisation.
    normalized: Arc<Csr>,
    normalized_weights: Tensor,
    /// Adjacency without self-loops, unit weights.
    plain: Arc<Csr>,
    plain_weights: Tensor,
}

impl Propagation {
    pub fn new(graph: &Graph) -> Self {
        let with_loops = graph.adjacency(true);
        let deg: Vec<f64> = (0..with_loops.n()).map(|i| with_loops.degree(i) as f64).collect();
        let w: Vec<f64> = with_loops
            .pairs()
            .iter()
            .map(|&(i, j)| 1.0 / (deg[i] * deg[j]).sqrt())
            .collect();
        let plain = graph.adjacency(false);
        let ones = vec![1.0; plain.targets.len()];
        Propagation {
            normalized: Arc::new(with_loops),
            normalized_weights: Tensor::column(&w),
            plain: Arc::new(plain),
            plain_weights: Tensor::column(&ones),
        }
    }

    /// `D^{-1/2} (A + I) D^{-1/2} x`.
    fn normalized(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let w = tape.constant(self.normalized_weights.clone());
        tape.aggregate(w, x, self.normalized.clone())
    }

    /// `A x`.
    fn neighbour_sum(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let w = tape.constant(self.plain_weights.clone());
        tape.aggregate(w, x, self.plain.clone())
    }
}

/// Records the backbone on `tape` and returns the `n x c` embeddings.
pub fn backbone_forward(
    tape: &mut Tape,
    prop: &Propagation,
    x: NodeId,
    params: &Bound,
    kind: Backbone,
) -> Result<NodeId> {
    match kind {
        Backbone::Gcn => {
            let h = gcn_layer(tape, prop, x, params.id("gcn.w1")?)?;
            gcn_layer(tape, prop, h, params.id("gcn.w2")?)
        }
        Backbone::Gin => {
            let h = gin_round(tape, prop, x, params, 1)?;
            gin_round(tape, prop, h, params, 2)
        }
        Backbone::Jk => {
            let h1 = gcn_layer(tape, prop, x, params.id("jk.w1")?)?;
            let h2 = gcn_layer(tape, prop, h1, params.id("jk.w2")?)?;
            let cat = tape.concat_cols(&[h1, h2])?;
            let z = tape.matmul(cat, params.id("jk.proj")?)?;
            Ok(tape.relu(z))
        }
    }
}

fn gcn_layer(tape: &mut Tape, prop: &Propagation, h: NodeId, w: NodeId) -> Result<NodeId> {
    let hw = tape.matmul(h, w)?;
    let agg = prop.normalized(tape, hw)?;
    Ok(tape.relu(agg))
}

fn gin_round(tape: &mut Tape, prop: &Propagation, h: NodeId, params: &Bound, round: usize) -> Result<NodeId> {
    let eps = params.id(&format!("gin.eps{round}"))?;
    let scaled = tape.scale_by(h, eps)?;
    let own = tape.add(h, scaled)?;
    let nbr = prop.neighbour_sum(tape, h)?;
    let m = tape.add(own, nbr)?;
    let a = tape.matmul(m, params.id(&format!("gin.mlp{round}.w1"))?)?;
    let a = tape.relu(a);
    let b = tape.matmul(a, params.id(&format!("gin.mlp{round}.w2"))?)?;
    Ok(tape.relu(b))
}

/// `h w + b` as an `n x 1` logit column.
pub fn linear_head(tape: &mut Tape, h: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let hw = tape.matmul(h, w)?;
    tape.add_row(hw, b)
}

/// Neighbourhoods (self included) of the attention layer, with the
/// similarity of each stored entry.
#[derive(Debug, Clone)]
pub struct AttentionContext {
    csr: Arc<Csr>,
    sets: Arc<IndexSets>,
    sources: Arc<Vec<usize>>,
    targets: Arc<Vec<usize>>,
    similarity: Tensor,
    uniform: Tensor,
}

impl AttentionContext {
    pub fn new(graph: &Graph, s: &SimilaritySet) -> Result<Self> {
        if s.n() != graph.n() {
            return Err(Error::dim(
                "attention",
                format!("similarity over {} nodes for a {}-node graph", s.n(), graph.n()),
            ));
        }
        let csr = graph.adjacency(true);
        let pairs = csr.pairs();
        let similarity: Vec<f64> = pairs
            .iter()
            .map(|&(i, j)| if i == j { 1.0 } else { s.weight(i, j) })
            .collect();
        let uniform: Vec<f64> = pairs.iter().map(|&(i, _)| 1.0 / csr.degree(i) as f64).collect();
        Ok(AttentionContext {
            sets: Arc::new(IndexSets::contiguous(&csr.offsets)),
            sources: Arc::new(pairs.iter().map(|p| p.0).collect()),
            targets: Arc::new(pairs.iter().map(|p| p.1).collect()),
            similarity: Tensor::column(&similarity),
            uniform: Tensor::column(&uniform),
            csr: Arc::new(csr),
        })
    }

    pub fn csr(&self) -> &Csr {
        &self.csr
    }

    /// Number of stored `(i, j)` entries, self-loops included.
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }
}

/// Whether the layer learns attention or averages its neighbourhood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attention {
    #[default]
    On,
    Off,
}

/// Attention coefficients as a column over the entries of
/// [`AttentionContext::csr`]; `projected` is `H W`.
fn attention_on_tape(tape: &mut Tape, ctx: &AttentionContext, projected: NodeId, a: NodeId) -> Result<NodeId> {
    let c = tape.value(projected).cols();
    if tape.value(a).shape() != (2 * c, 1) {
        return Err(Error::dim(
            "attention",
            format!("attention vector {:?} for width {c}", tape.value(a).shape()),
        ));
    }
    let a_src = tape.slice_rows(a, 0, c)?;
    let a_dst = tape.slice_rows(a, c, c)?;
    let s_src = tape.matmul(projected, a_src)?;
    let s_dst = tape.matmul(projected, a_dst)?;
    let left = tape.gather_rows(s_src, ctx.sources.clone())?;
    let right = tape.gather_rows(s_dst, ctx.targets.clone())?;
    let e = tape.add(left, right)?;
    let e = tape.leaky_relu(e, LEAKY_SLOPE);
    let sim = tape.constant(ctx.similarity.clone());
    let e = tape.hadamard(e, sim)?;
    tape.softmax(e, ctx.sets.clone())
}

/// Attention coefficients for embeddings `h` and fair-layer parameters,
/// one per entry of [`AttentionContext::csr`].
pub fn fair_attention(h: &Tensor, params: &Params, ctx: &AttentionContext) -> Result<Vec<f64>> {
    let mut tape = Tape::untraced();
    let hn = tape.constant(h.clone());
    let w = tape.constant(params.get("fair.w")?.clone());
    let a = tape.constant(params.get("fair.a")?.clone());
    let p = tape.matmul(hn, w)?;
    let alpha = attention_on_tape(&mut tape, ctx, p, a)?;
    Ok(tape.value(alpha).data().to_vec())
}

/// Records `ELU(sum_j alpha_ij W h_j)` on `tape`.
pub fn fair_layer_forward(
    tape: &mut Tape,
    ctx: &AttentionContext,
    h: NodeId,
    params: &Bound,
    attention: Attention,
) -> Result<NodeId> {
    if tape.value(h).rows() != ctx.csr.n() {
        return Err(Error::dim("fair layer", "embedding rows differ from graph size"));
    }
    let p = tape.matmul(h, params.id("fair.w")?)?;
    let alpha = match attention {
        Attention::On => attention_on_tape(tape, ctx, p, params.id("fair.a")?)?,
        Attention::Off => tape.constant(ctx.uniform.clone()),
    };
    let agg = tape.aggregate(alpha, p, ctx.csr.clone())?;
    Ok(tape.elu(agg))
}

/// Plain-value forward of the backbone, no gradients.
pub fn embed(graph: &Graph, prop: &Propagation, params: &Params, kind: Backbone) -> Result<Tensor> {
    let mut tape = Tape::untraced();
    let x = tape.constant(graph.features.clone());
    let bound = params.bind(&mut tape, false);
    let z = backbone_forward(&mut tape, prop, x, &bound, kind)?;
    Ok(tape.value(z).clone())
}

/// Sigmoid of a logit column.
pub fn probabilities(logits: &Tensor) -> Vec<f64> {
    logits.data().iter().map(|&v| tensor::sigmoid(v)).collect()
}
