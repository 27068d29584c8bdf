//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Operations are appended to a [`Tape`] in evaluation order, so every
//! node's parents have smaller indices than the node itself. [`Tape::backward`]
//! walks the tape once in reverse and returns the gradient of a scalar root
//! with respect to every node that depends on a leaf.
//!
//! ```
//! use ginigraph::autodiff::Tape;
//! use ginigraph::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let a = tape.leaf(Tensor::from_rows(&[[1.0, -2.0], [3.0, 0.5]]).unwrap());
//! let sq = tape.hadamard(a, a).unwrap();
//! let root = tape.sum_all(sq);
//! let grads = tape.backward(root).unwrap();
//! assert_eq!(grads.get(a).unwrap().data(), &[2.0, -4.0, 6.0, 1.0]);
//! ```
//!
//! Besides the elementwise and linear-algebra primitives the tape has a few
//! fused graph operations: softmax over arbitrary index sets, weighted
//! neighbour aggregation, the Laplacian quadratic form `Tr(Z^T L Z)`, pairwise
//! embedding distances, top-k mean, and a stable binary cross-entropy on
//! logits.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::Csr;
use crate::similarity::{laplacian_apply, quadratic_form, SimilaritySet};
use crate::tensor::{self, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A family of disjoint index sets over the flattened entries of a tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSets {
    offsets: Vec<usize>,
    members: Vec<usize>,
}

impl IndexSets {
    pub fn new<S: AsRef<[usize]>>(sets: &[S]) -> Self {
        let mut offsets = vec![0];
        let mut members = Vec::new();
        for s in sets {
            members.extend_from_slice(s.as_ref());
            offsets.push(members.len());
        }
        IndexSets { offsets, members }
    }

    /// Contiguous runs `[offsets[k], offsets[k + 1])`, e.g. the rows of a
    /// [`Csr`].
    pub fn contiguous(offsets: &[usize]) -> Self {
        let total = offsets.last().copied().unwrap_or(0);
        IndexSets {
            offsets: offsets.to_vec(),
            members: (0..total).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn set(&self, k: usize) -> &[usize] {
        &self.members[self.offsets[k]..self.offsets[k + 1]]
    }

    fn check(&self, len: usize) -> Result<()> {
        let mut seen = vec![false; len];
        for &m in &self.members {
            if m >= len {
                return Err(Error::dim("softmax", format!("index {m} of {len}")));
            }
            if std::mem::replace(&mut seen[m], true) {
                return Err(Error::Contract(format!("index {m} appears in two softmax sets")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    ScaleBy(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Transpose(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize),
    GatherRows(NodeId, Arc<Vec<usize>>),
    SumAll(NodeId),
    LeakyRelu(NodeId, f64),
    Elu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softmax(NodeId, Arc<IndexSets>),
    Aggregate(NodeId, NodeId, Arc<Csr>),
    QuadraticForm(NodeId, Arc<SimilaritySet>),
    PairDistances(NodeId, Arc<Vec<(usize, usize)>>),
    TopKMean(NodeId, Vec<usize>),
    BceWithLogits(NodeId, Arc<Vec<(usize, f64)>>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// An untraced tape ([`Tape::untraced`]) computes the same values but keeps
/// no operation graph, so it cannot be differentiated.
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    tracing: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the root does not depend on the node.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, zeros of `like`'s shape if the root does not
    /// depend on it.
    pub fn get_or_zeros(&self, id: NodeId, like: &Tensor) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }
}

fn ensure_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            tracing: true,
        }
    }

    pub fn untraced() -> Self {
        Tape {
            nodes: Vec::new(),
            tracing: false,
        }
    }

    pub fn is_tracing(&self) -> bool {
        self.tracing
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let requires_grad = self.tracing;
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Constant,
            value,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, parents: &[NodeId], value: Tensor) -> NodeId {
        let requires_grad = self.tracing && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), &[a, b], v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), &[a, b], v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), &[a, b], v))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(Op::Hadamard(a, b), &[a, b], v))
    }

    /// Elementwise quotient; a zero divisor is a domain error.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        ensure_same("divide", self.value(a), self.value(b))?;
        if self.value(b).data().iter().any(|&v| v == 0.0) {
            return Err(Error::domain("divide", "zero divisor"));
        }
        let v = self.value(a).div(self.value(b))?;
        Ok(self.push(Op::Div(a, b), &[a, b], v))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.value(a).scale(factor);
        self.push(Op::Scale(a, factor), &[a], v)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a), &[a], v)
    }

    /// Multiplies every entry of `a` by the 1x1 node `s`.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).shape() != (1, 1) {
            return Err(Error::dim("scale-by", "factor must be 1x1"));
        }
        let f = self.value(s).item();
        let v = self.value(a).scale(f);
        Ok(self.push(Op::ScaleBy(a, s), &[a, s], v))
    }

    /// Adds the 1xk row `b` to every row of the nxk tensor `a`.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Error::dim(
                "add-row",
                format!("{:?} plus row {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut v = av.clone();
        for i in 0..v.rows() {
            for (o, b) in v.row_mut(i).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(Op::AddRow(a, b), &[a, b], v))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), &[a], v)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&values)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), parts, v))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&values)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), parts, v))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(a).slice_rows(start, len)?;
        Ok(self.push(Op::SliceRows(a, start), &[a], v))
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: Arc<Vec<usize>>) -> Result<NodeId> {
        let v = self.value(a).select_rows(&indices)?;
        Ok(self.push(Op::GatherRows(a, indices), &[a], v))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::SumAll(a), &[a], v)
    }

    /// Mean of all entries.
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = self.value(a).map(|x| tensor::leaky_relu(x, slope));
        self.push(Op::LeakyRelu(a, slope), &[a], v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.leaky_relu(a, 0.0)
    }

    pub fn elu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(tensor::elu);
        self.push(Op::Elu(a), &[a], v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(tensor::sigmoid);
        self.push(Op::Sigmoid(a), &[a], v)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::exp);
        if !v.is_finite() {
            return Err(Error::domain("exp", "overflow"));
        }
        Ok(self.push(Op::Exp(a), &[a], v))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::domain("log", format!("argument {bad}")));
        }
        let v = self.value(a).map(f64::ln);
        Ok(self.push(Op::Log(a), &[a], v))
    }

    /// Softmax taken independently over each index set of the flattened
    /// input; entries outside every set come out as zero. The per-set
    /// maximum is subtracted before exponentiation.
    pub fn softmax(&mut self, a: NodeId, sets: Arc<IndexSets>) -> Result<NodeId> {
        let x = self.value(a);
        sets.check(x.len())?;
        if !x.is_finite() {
            return Err(Error::domain("softmax", "non-finite logits"));
        }
        let mut v = Tensor::zeros(x.rows(), x.cols());
        for k in 0..sets.len() {
            let idx = sets.set(k);
            let max = idx.iter().map(|&i| x.data()[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for &i in idx {
                let e = (x.data()[i] - max).exp();
                v.data_mut()[i] = e;
                total += e;
            }
            for &i in idx {
                v.data_mut()[i] /= total;
            }
        }
        Ok(self.push(Op::Softmax(a, sets), &[a], v))
    }

    /// Weighted neighbour sum: `out[i] = sum_e weights[e] * x[target(e)]`
    /// over the entries `e` of row `i` of `csr`. `weights` is a column with
    /// one entry per stored target.
    pub fn aggregate(&mut self, weights: NodeId, x: NodeId, csr: Arc<Csr>) -> Result<NodeId> {
        let (w, xv) = (self.value(weights), self.value(x));
        if w.cols() != 1 || w.rows() != csr.targets.len() {
            return Err(Error::dim(
                "aggregate",
                format!("weights {:?} for {} entries", w.shape(), csr.targets.len()),
            ));
        }
        if csr.n() != xv.rows() {
            return Err(Error::dim(
                "aggregate",
                format!("{} rows for {} nodes", xv.rows(), csr.n()),
            ));
        }
        let c = xv.cols();
        let mut v = Tensor::zeros(xv.rows(), c);
        for i in 0..csr.n() {
            let out = &mut v.data_mut()[i * c..(i + 1) * c];
            for e in csr.offsets[i]..csr.offsets[i + 1] {
                let we = w.data()[e];
                for (o, &s) in out.iter_mut().zip(xv.row(csr.targets[e])) {
                    *o += we * s;
                }
            }
        }
        Ok(self.push(Op::Aggregate(weights, x, csr), &[weights, x], v))
    }

    /// `Tr(Z^T L Z) = 1/2 sum_ij S[i,j] |z_i - z_j|^2` without forming `L`.
    pub fn quadratic_form(&mut self, z: NodeId, s: Arc<SimilaritySet>) -> Result<NodeId> {
        let v = Tensor::scalar(quadratic_form(&s, self.value(z))?);
        Ok(self.push(Op::QuadraticForm(z, s), &[z], v))
    }

    /// Column of Euclidean distances `|z_i - z_j|_2`, one per pair.
    pub fn pair_distances(&mut self, z: NodeId, pairs: Arc<Vec<(usize, usize)>>) -> Result<NodeId> {
        let zv = self.value(z);
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= zv.rows() || j >= zv.rows()) {
            return Err(Error::dim("pair-distances", format!("pair ({i}, {j}) of {} rows", zv.rows())));
        }
        let d: Vec<f64> = pairs
            .iter()
            .map(|&(i, j)| {
                zv.row(i)
                    .iter()
                    .zip(zv.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        Ok(self.push(Op::PairDistances(z, pairs), &[z], Tensor::column(&d)))
    }

    /// Mean of the `k` largest entries; ties broken by position.
    pub fn top_k_mean(&mut self, a: NodeId, k: usize) -> Result<NodeId> {
        let x = self.value(a);
        if k == 0 || k > x.len() {
            return Err(Error::Contract(format!("top-k with k = {k} over {} entries", x.len())));
        }
        let mut order: Vec<usize> = (0..x.len()).collect();
        order.sort_by(|&p, &q| x.data()[q].total_cmp(&x.data()[p]).then(p.cmp(&q)));
        order.truncate(k);
        let v = Tensor::scalar(order.iter().map(|&i| x.data()[i]).sum::<f64>() / k as f64);
        Ok(self.push(Op::TopKMean(a, order), &[a], v))
    }

    /// Mean binary cross-entropy of a logit column against `(row, label)`
    /// targets, in the overflow-free form
    /// `max(x, 0) - x y + ln(1 + exp(-|x|))`.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: Arc<Vec<(usize, f64)>>) -> Result<NodeId> {
        let x = self.value(logits);
        if x.cols() != 1 {
            return Err(Error::dim("bce", "logits must be a column"));
        }
        if targets.is_empty() {
            return Err(Error::Contract("cross-entropy over an empty mask".into()));
        }
        if let Some(&(i, _)) = targets.iter().find(|t| t.0 >= x.rows()) {
            return Err(Error::dim("bce", format!("row {i} of {}", x.rows())));
        }
        let total: f64 = targets
            .iter()
            .map(|&(i, y)| {
                let z = x.data()[i];
                z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
            })
            .sum();
        let v = Tensor::scalar(total / targets.len() as f64);
        Ok(self.push(Op::BceWithLogits(logits, targets), &[logits], v))
    }

    /// Gradients of the scalar `root` with respect to every node it depends
    /// on. Uses of a node by several consumers accumulate additively.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if !self.tracing {
            return Err(Error::Contract("backward on an untraced tape".into()));
        }
        if self.value(root).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward root must be 1x1, got {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
        if !self.nodes[id.0].requires_grad {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(acc) => acc.axpy(1.0, &g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let gb = g.matmul(&self.value(*b).transpose())?;
                    self.accumulate(grads, *a, gb)?;
                }
                if self.needs(*b) {
                    let ga = self.value(*a).transpose().matmul(g)?;
                    self.accumulate(grads, *b, ga)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Hadamard(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.hadamard(self.value(*b))?)?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.hadamard(self.value(*a))?)?;
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.div(bv)?)?;
                }
                if self.needs(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let gb = g.hadamard(out)?.div(bv)?.scale(-1.0);
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.scale(*f))?,
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone())?,
            Op::ScaleBy(a, s) => {
                let f = self.value(*s).item();
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.scale(f))?;
                }
                if self.needs(*s) {
                    let gs = g.hadamard(self.value(*a))?.sum();
                    self.accumulate(grads, *s, Tensor::scalar(gs))?;
                }
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.needs(*b) {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose())?,
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if self.needs(*p) {
                        self.accumulate(grads, *p, g.slice_rows(start, rows)?)?;
                    }
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let cols = pv.cols();
                    if self.needs(*p) {
                        let mut gp = Tensor::zeros(pv.rows(), cols);
                        for i in 0..pv.rows() {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[start..start + cols]);
                        }
                        self.accumulate(grads, *p, gp)?;
                    }
                    start += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                let c = av.cols();
                ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, ga)?;
            }
            Op::GatherRows(a, idx) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::SumAll(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, Tensor::filled(av.rows(), av.cols(), g.item()))?;
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let mut ga = g.clone();
                for (o, &xv) in ga.data_mut().iter_mut().zip(x.data()) {
                    if xv <= 0.0 {
                        *o *= slope;
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::Elu(a) => {
                let x = self.value(*a);
                let mut ga = g.clone();
                for ((o, &xv), &yv) in ga.data_mut().iter_mut().zip(x.data()).zip(out.data()) {
                    if xv <= 0.0 {
                        *o *= yv + 1.0;
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::Sigmoid(a) => {
                let local = out.map(|y| y * (1.0 - y));
                self.accumulate(grads, *a, g.hadamard(&local)?)?;
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.hadamard(out)?)?,
            Op::Log(a) => self.accumulate(grads, *a, g.div(self.value(*a))?)?,
            Op::Softmax(a, sets) => {
                let mut ga = Tensor::zeros(out.rows(), out.cols());
                for k in 0..sets.len() {
                    let idx = sets.set(k);
                    let dot: f64 = idx.iter().map(|&i| out.data()[i] * g.data()[i]).sum();
                    for &i in idx {
                        ga.data_mut()[i] = out.data()[i] * (g.data()[i] - dot);
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::Aggregate(w, x, csr) => {
                let (wv, xv) = (self.value(*w), self.value(*x));
                let c = xv.cols();
                if self.needs(*w) {
                    let mut gw = Tensor::zeros(wv.rows(), 1);
                    for i in 0..csr.n() {
                        for e in csr.offsets[i]..csr.offsets[i + 1] {
                            gw.data_mut()[e] = tensor_dot(g.row(i), xv.row(csr.targets[e]));
                        }
                    }
                    self.accumulate(grads, *w, gw)?;
                }
                if self.needs(*x) {
                    let mut gx = Tensor::zeros(xv.rows(), c);
                    for i in 0..csr.n() {
                        for e in csr.offsets[i]..csr.offsets[i + 1] {
                            let we = wv.data()[e];
                            let j = csr.targets[e];
                            for (o, v) in gx.data_mut()[j * c..(j + 1) * c].iter_mut().zip(g.row(i)) {
                                *o += we * v;
                            }
                        }
                    }
                    self.accumulate(grads, *x, gx)?;
                }
            }
            Op::QuadraticForm(z, s) => {
                let lz = laplacian_apply(s, self.value(*z))?;
                self.accumulate(grads, *z, lz.scale(2.0 * g.item()))?;
            }
            Op::PairDistances(z, pairs) => {
                let zv = self.value(*z);
                let c = zv.cols();
                let mut gz = Tensor::zeros(zv.rows(), c);
                for (p, &(i, j)) in pairs.iter().enumerate() {
                    let d = out.data()[p];
                    if d == 0.0 {
                        continue;
                    }
                    let f = g.data()[p] / d;
                    for k in 0..c {
                        let diff = zv.get(i, k) - zv.get(j, k);
                        gz.data_mut()[i * c + k] += f * diff;
                        gz.data_mut()[j * c + k] -= f * diff;
                    }
                }
                self.accumulate(grads, *z, gz)?;
            }
            Op::TopKMean(a, chosen) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                let share = g.item() / chosen.len() as f64;
                for &i in chosen {
                    ga.data_mut()[i] = share;
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::BceWithLogits(a, targets) => {
                let x = self.value(*a);
                let mut ga = Tensor::zeros(x.rows(), 1);
                let scale = g.item() / targets.len() as f64;
                for &(i, y) in targets.iter() {
                    ga.data_mut()[i] += scale * (tensor::sigmoid(x.data()[i]) - y);
                }
                self.accumulate(grads, *a, ga)?;
            }
        }
        Ok(())
    }
}

fn tensor_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Result of comparing an analytic gradient with central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `max_k |analytic_k - numeric_k| / max(1, |analytic_k|)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub passed: bool,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

/// Compares `analytic` with central differences `(f(x+h) - f(x-h)) / 2h`
/// of `eval` at `point`, coordinate by coordinate.
pub fn compare_with_central_differences<F>(
    eval: F,
    point: &Tensor,
    analytic: &Tensor,
    step: f64,
    tolerance: f64,
) -> Result<GradCheck>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("finite-difference step {step} must be positive")));
    }
    if analytic.shape() != point.shape() {
        return Err(Error::dim(
            "finite_diff_check",
            format!("gradient {:?} for point {:?}", analytic.shape(), point.shape()),
        ));
    }
    let mut numeric = Tensor::zeros(point.rows(), point.cols());
    let mut probe = point.clone();
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for k in 0..point.len() {
        let x0 = point.data()[k];
        probe.data_mut()[k] = x0 + step;
        let fp = eval(&probe)?;
        probe.data_mut()[k] = x0 - step;
        let fm = eval(&probe)?;
        probe.data_mut()[k] = x0;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Evaluation(format!("non-finite loss near coordinate {k}")));
        }
        let num = (fp - fm) / (2.0 * step);
        numeric.data_mut()[k] = num;
        let a = analytic.data()[k];
        let rel = (a - num).abs() / a.abs().max(1.0);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = k;
        }
    }
    Ok(GradCheck {
        max_rel_error,
        worst_index,
        passed: max_rel_error <= tolerance,
        analytic: analytic.clone(),
        numeric,
    })
}

/// Builds `loss` on a fresh tape with `point` as its only leaf, differentiates
/// it, and checks the result against central differences.
pub fn finite_diff_check<F>(loss: F, point: &Tensor, step: f64, tolerance: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let root = loss(&mut tape, x)?;
    let analytic = tape.backward(root)?.get_or_zeros(x, point);
    let eval = |p: &Tensor| -> Result<f64> {
        let mut t = Tape::untraced();
        let x = t.leaf(p.clone());
        let r = loss(&mut t, x)?;
        Ok(t.value(r).item())
    };
    compare_with_central_differences(eval, point, &analytic, step, tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn forward_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap());
        let i3 = t.constant(Tensor::identity(3));
        let m = t.matmul(i3, a).unwrap();
        assert_eq!(t.value(m), t.value(a));
        let x = t.constant(Tensor::scalar(-1.0));
        let l = t.leaky_relu(x, 0.2);
        assert_eq!(t.value(l).item(), -0.2);
        let z = t.constant(Tensor::scalar(0.0));
        let s = t.sigmoid(z);
        assert_eq!(t.value(s).item(), 0.5);
    }

    #[test]
    fn domain_and_shape_errors() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_rows(&[[1.0, -1.0]]).unwrap());
        assert!(matches!(t.log(a), Err(Error::Domain { .. })));
        let b = t.leaf(Tensor::zeros(3, 1));
        assert!(matches!(t.add(a, b), Err(Error::Dimension { .. })));
        assert!(matches!(t.matmul(a, a), Err(Error::Dimension { .. })));
        let bad = Arc::new(IndexSets::new(&[vec![0, 5]]));
        assert!(t.softmax(b, bad).is_err());
        let inf = t.leaf(Tensor::column(&[f64::INFINITY, 0.0]));
        let sets = Arc::new(IndexSets::new(&[vec![0, 1]]));
        assert!(matches!(t.softmax(inf, sets), Err(Error::Domain { .. })));
    }

    #[test]
    fn backward_needs_scalar_root() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(2, 2));
        assert!(matches!(t.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn quadratic_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap());
        let sq = t.hadamard(a, a).unwrap();
        let r = t.sum_all(sq);
        let g = t.backward(r).unwrap();
        assert_eq!(g.get(a).unwrap(), &t.value(a).scale(2.0));
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let s = t.sigmoid(x);
        assert_eq!(t.backward(s).unwrap().get(x).unwrap().item(), 0.25);
    }

    #[test]
    fn square_finite_difference() {
        let r = finite_diff_check(
            |t, x| t.hadamard(x, x),
            &Tensor::scalar(3.0),
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!((r.analytic.item() - 6.0).abs() < 1e-15);
        assert!((r.numeric.item() - 6.0).abs() < 1e-9);
        assert!(r.passed);
    }

    #[test]
    fn corrupted_gradient_detected() {
        let mut g = rng(1);
        let p = Tensor::random_uniform(3, 2, -1.0, 1.0, &mut g);
        let mut wrong = p.scale(2.0);
        wrong.data_mut()[4] *= -1.0;
        let eval = |x: &Tensor| Ok(x.data().iter().map(|v| v * v).sum::<f64>());
        let r = compare_with_central_differences(eval, &p, &wrong, 1e-5, 1e-4).unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst_index, 4);
        let right = compare_with_central_differences(eval, &p, &p.scale(2.0), 1e-5, 1e-4).unwrap();
        assert!(right.passed);
    }

    #[test]
    fn non_finite_perturbation_is_an_evaluation_error() {
        let eval = |x: &Tensor| Ok(1.0 / x.item());
        assert!(compare_with_central_differences(eval, &Tensor::scalar(0.0), &Tensor::scalar(0.0), 1e-5, 1e-4).is_ok());
        let eval = |x: &Tensor| Ok(x.item().ln());
        let r = compare_with_central_differences(eval, &Tensor::scalar(0.0), &Tensor::scalar(0.0), 1e-5, 1e-4);
        assert!(matches!(r, Err(Error::Evaluation(_))));
    }

    #[test]
    fn accumulation_is_additive() {
        let mut g = rng(2);
        let x0 = Tensor::random_uniform(3, 3, -1.0, 1.0, &mut g);
        let w0 = Tensor::random_uniform(3, 3, -1.0, 1.0, &mut g);
        // Two consumers of x: sum(x W) and sum(exp(x)).
        let grad_of = |use_a: bool, use_b: bool| {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone());
            let w = t.constant(w0.clone());
            let mut terms = Vec::new();
            if use_a {
                let m = t.matmul(x, w).unwrap();
                terms.push(t.sum_all(m));
            }
            if use_b {
                let e = t.exp(x).unwrap();
                terms.push(t.sum_all(e));
            }
            let root = if terms.len() == 2 { t.add(terms[0], terms[1]).unwrap() } else { terms[0] };
            t.backward(root).unwrap().get(x).unwrap().clone()
        };
        let both = grad_of(true, true);
        let sum = grad_of(true, false).add(&grad_of(false, true)).unwrap();
        assert!(both.sub(&sum).unwrap().frobenius_norm() < 1e-14);
    }

    #[test]
    fn tracing_does_not_change_values() {
        let mut g = rng(3);
        let a0 = Tensor::random_uniform(4, 3, -1.0, 1.0, &mut g);
        let run = |mut t: Tape| {
            let a = t.leaf(a0.clone());
            let e = t.elu(a);
            let at = t.transpose(e);
            let m = t.matmul(e, at).unwrap();
            let s = t.sigmoid(m);
            let sets = Arc::new(IndexSets::contiguous(&[0, 5, 16]));
            let sm = t.softmax(s, sets).unwrap();
            t.value(sm).clone()
        };
        assert_eq!(run(Tape::new()), run(Tape::untraced()));
        let mut t = Tape::untraced();
        let x = t.leaf(Tensor::scalar(1.0));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut g = rng(4);
        let x0 = Tensor::random_uniform(6, 1, -3.0, 3.0, &mut g);
        let sets = Arc::new(IndexSets::new(&[vec![0, 2, 4], vec![1, 3, 5]]));
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let a = t.softmax(x, sets.clone()).unwrap();
        let shifted = t.constant(x0.map(|v| v + 7.5));
        let b = t.softmax(shifted, sets).unwrap();
        for (p, q) in t.value(a).data().iter().zip(t.value(b).data()) {
            assert!((p - q).abs() < 1e-12);
        }
        let s: f64 = [0, 2, 4].iter().map(|&i| t.value(a).data()[i]).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    /// Every differentiable op against central differences on random inputs
    /// in [-1, 1].
    #[test]
    fn every_op_matches_finite_differences() {
        type Build = fn(&mut Tape, NodeId, &Tensor) -> Result<NodeId>;
        let cases: Vec<(&str, Build)> = vec![
            ("matmul-left", |t, x, o| {
                let c = t.constant(o.clone());
                let ct = t.transpose(c);
                let m = t.matmul(x, ct)?;
                let s = t.sin_like(m);
                Ok(t.sum_all(s))
            }),
            ("matmul-right", |t, x, o| {
                let c = t.constant(o.transpose());
                let m = t.matmul(c, x)?;
                let s = t.sin_like(m);
                Ok(t.sum_all(s))
            }),
            ("add-sub-hadamard", |t, x, o| {
                let c = t.constant(o.clone());
                let a = t.add(x, c)?;
                let b = t.sub(x, c)?;
                let h = t.hadamard(a, b)?;
                let h2 = t.hadamard(h, x)?;
                Ok(t.sum_all(h2))
            }),
            ("div", |t, x, o| {
                let c = t.constant(o.map(|v| v.abs() + 1.5));
                let e = t.exp(x)?;
                let d1 = t.div(x, c)?;
                let d2 = t.div(c, e)?;
                let s = t.add(d1, d2)?;
                let s2 = t.hadamard(s, s)?;
                Ok(t.sum_all(s2))
            }),
            ("scale-addscalar-scaleby", |t, x, _| {
                let a = t.scale(x, -1.7);
                let b = t.add_scalar(a, 0.3);
                let s = t.slice_rows(x, 1, 1)?;
                let s = t.transpose(s);
                let s = t.slice_rows(s, 0, 1)?;
                let c = t.scale_by(b, s)?;
                let h = t.hadamard(c, c)?;
                Ok(t.sum_all(h))
            }),
            ("add-row", |t, x, o| {
                let r = t.slice_rows(x, 0, 1)?;
                let c = t.constant(o.clone());
                let a = t.add_row(c, r)?;
                let a2 = t.hadamard(a, a)?;
                let a3 = t.hadamard(a2, x)?;
                Ok(t.sum_all(a3))
            }),
            ("concat-gather", |t, x, o| {
                let c = t.constant(o.clone());
                let r = t.concat_rows(&[x, c, x])?;
                let k = t.concat_cols(&[c, x])?;
                let g = t.gather_rows(x, Arc::new(vec![3, 0, 3, 1]))?;
                let r2 = t.hadamard(r, r)?;
                let k2 = t.hadamard(k, k)?;
                let g2 = t.exp(g)?;
                let a = t.sum_all(r2);
                let b = t.sum_all(k2);
                let c2 = t.sum_all(g2);
                let s = t.add(a, b)?;
                t.add(s, c2)
            }),
            ("activations", |t, x, _| {
                let a = t.leaky_relu(x, 0.2);
                let b = t.elu(x);
                let c = t.sigmoid(x);
                let d = t.exp(x)?;
                let e = t.add_scalar(d, 0.5);
                let f = t.log(e)?;
                let ab = t.hadamard(a, b)?;
                let cf = t.hadamard(c, f)?;
                let s = t.add(ab, cf)?;
                let s2 = t.hadamard(s, x)?;
                Ok(t.sum_all(s2))
            }),
            ("softmax", |t, x, o| {
                let sets = Arc::new(IndexSets::new(&[vec![0, 3, 5], vec![1, 2], vec![6, 7]]));
                let s = t.softmax(x, sets)?;
                let c = t.constant(o.clone());
                let h = t.hadamard(s, c)?;
                Ok(t.sum_all(h))
            }),
            ("aggregate", |t, x, o| {
                let c0 = t.column_of(x, 0)?;
                let c1 = t.column_of(x, 1)?;
                let w = t.concat_rows(&[c0, c1])?;
                let feats = t.constant(o.clone());
                let xf = t.add(feats, x)?;
                let csr = Csr::from_lists(vec![vec![0, 1], vec![0, 1, 2], vec![2], vec![1, 3]]);
                let agg = t.aggregate(w, xf, Arc::new(csr))?;
                let a2 = t.hadamard(agg, agg)?;
                Ok(t.sum_all(a2))
            }),
            ("quadratic-form", |t, x, _| {
                let s = SimilaritySet::from_entries(4, [(0, 1, 0.7), (1, 2, 0.2), (0, 3, 1.0), (2, 3, 0.4)]).unwrap();
                t.quadratic_form(x, Arc::new(s))
            }),
            ("pair-distances", |t, x, _| {
                let d = t.pair_distances(x, Arc::new(vec![(0, 1), (1, 2), (0, 3), (2, 3)]))?;
                let e = t.hadamard(d, d)?;
                let s = t.add(d, e)?;
                Ok(t.sum_all(s))
            }),
            ("top-k-mean", |t, x, _| {
                let c = t.first_column(x)?;
                t.top_k_mean(c, 2)
            }),
            ("bce", |t, x, _| {
                let c = t.first_column(x)?;
                let c = t.scale(c, 3.0);
                t.bce_with_logits(c, Arc::new(vec![(0, 1.0), (1, 0.0), (3, 1.0)]))
            }),
        ];
        let mut g = rng(5);
        for (name, build) in cases {
            for _ in 0..50 {
                let point = Tensor::random_uniform(4, 2, -1.0, 1.0, &mut g);
                let other = Tensor::random_uniform(4, 2, -1.0, 1.0, &mut g);
                let r = finite_diff_check(|t, x| build(t, x, &other), &point, 1e-5, 1e-4).unwrap();
                assert!(r.passed, "{name}: rel err {} at {}", r.max_rel_error, r.worst_index);
            }
        }
    }

    // Small helpers used only to build smooth test functions.
    impl Tape {
        fn sin_like(&mut self, a: NodeId) -> NodeId {
            // x * sigmoid(x): smooth and non-linear.
            let s = self.sigmoid(a);
            self.hadamard(a, s).unwrap()
        }

        fn first_column(&mut self, a: NodeId) -> Result<NodeId> {
            self.column_of(a, 0)
        }

        fn column_of(&mut self, a: NodeId, k: usize) -> Result<NodeId> {
            let c = self.value(a).cols();
            let mut sel = Tensor::zeros(c, 1);
            sel.set(k, 0, 1.0);
            let s = self.constant(sel);
            self.matmul(a, s)
        }
    }
}
