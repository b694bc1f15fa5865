//! Define-by-run computation graph with reverse-mode gradients.
//!
//! Nodes are evaluated as they are added. A built graph can be re-evaluated
//! with new leaf bindings via [`Graph::forward`], which is what the gradient
//! checker uses to perturb single coordinates without rebuilding the model.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use super::tensor::{matmul, matmul_nt, matmul_tn_acc, Tensor};
use crate::error::{Error, Result};

/// Epsilon added to the variance inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-6;
/// Probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` inside cross-entropy.
pub const P_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Concat(Vec<NodeId>),
    Gather(NodeId, Rc<Vec<usize>>),
    SliceCols(NodeId, usize, usize),
    Softmax(NodeId),
    SegmentSoftmax(NodeId, Rc<Vec<usize>>),
    SegmentWeightedSum(NodeId, NodeId, Rc<Vec<usize>>),
    BlockScores(NodeId, NodeId, usize, f64),
    BlockApply(NodeId, NodeId, usize),
    LayerNorm(NodeId, NodeId, NodeId),
    Bce(NodeId, Rc<Vec<f64>>),
    Sum(NodeId),
    Mean(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Concat(..) => "concat",
            Op::Gather(..) => "gather",
            Op::SliceCols(..) => "slice_cols",
            Op::Softmax(..) => "softmax",
            Op::SegmentSoftmax(..) => "segment_softmax",
            Op::SegmentWeightedSum(..) => "segment_weighted_sum",
            Op::BlockScores(..) => "block_scores",
            Op::BlockApply(..) => "block_apply",
            Op::LayerNorm(..) => "layer_norm",
            Op::Bce(..) => "bce",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }
}

struct Node {
    op: Op,
    label: Option<String>,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to every named leaf.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, name: String, grad: Tensor) {
        self.grads.insert(name, grad);
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Tensor>,
    params: HashMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// Registers a named learnable leaf. Registering the same name twice
    /// returns the existing node.
    pub fn param(&mut self, name: &str, value: &Tensor) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op: Op::Leaf, label: Some(name.to_string()), needs_grad: true });
        self.values.push(value.clone());
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    /// Constant leaf; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op: Op::Leaf, label: None, needs_grad: false });
        self.values.push(value);
        id
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let id = NodeId(self.nodes.len());
        let value = self.eval(&op).map_err(|e| describe(e, id, &op, None))?;
        let needs_grad = inputs(&op).iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { op, label: None, needs_grad });
        self.values.push(value);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::AddBias(x, bias))
    }

    /// `x · w + b`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, factor))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid(x))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push(Op::Concat(parts.to_vec()))
    }

    /// Row lookup: `out[i] = table[ids[i]]`. Used for embeddings and for
    /// broadcasting per-request rows onto per-impression rows.
    pub fn gather(&mut self, table: NodeId, ids: Vec<usize>) -> Result<NodeId> {
        self.push(Op::Gather(table, Rc::new(ids)))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::SliceCols(x, start, len))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax(x))
    }

    /// Softmax of a column of logits within contiguous segments
    /// `offsets[g]..offsets[g+1]`. Empty segments are allowed.
    pub fn segment_softmax(&mut self, logits: NodeId, offsets: Rc<Vec<usize>>) -> Result<NodeId> {
        self.push(Op::SegmentSoftmax(logits, offsets))
    }

    /// `out[g] = Σ_{i ∈ segment g} w_i · values[i]`; empty segments give zero rows.
    pub fn segment_weighted_sum(
        &mut self,
        weights: NodeId,
        values: NodeId,
        offsets: Rc<Vec<usize>>,
    ) -> Result<NodeId> {
        self.push(Op::SegmentWeightedSum(weights, values, offsets))
    }

    /// Per-block scaled dot products: rows are grouped in blocks of `block`,
    /// `out[r, j] = scale · q[r] · k[block_start(r) + j]`.
    pub fn block_scores(&mut self, q: NodeId, k: NodeId, block: usize, scale: f64) -> Result<NodeId> {
        self.push(Op::BlockScores(q, k, block, scale))
    }

    /// Per-block mixing: `out[r] = Σ_j p[r, j] · v[block_start(r) + j]`.
    pub fn block_apply(&mut self, p: NodeId, v: NodeId, block: usize) -> Result<NodeId> {
        self.push(Op::BlockApply(p, v, block))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::LayerNorm(x, gain, bias))
    }

    /// Mean binary cross-entropy of a column of probabilities.
    pub fn bce(&mut self, probs: NodeId, labels: Vec<f64>) -> Result<NodeId> {
        self.push(Op::Bce(probs, Rc::new(labels)))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(x))
    }

    /// Re-evaluates every node, rebinding named leaves found in `bindings`,
    /// and returns the value of the last node.
    pub fn forward(&mut self, bindings: &HashMap<String, Tensor>) -> Result<&Tensor> {
        if self.nodes.is_empty() {
            return Err(Error::usage("forward on an empty graph"));
        }
        for i in 0..self.nodes.len() {
            let value = match &self.nodes[i].op {
                Op::Leaf => match self.nodes[i].label.as_ref().and_then(|l| bindings.get(l)) {
                    Some(t) => t.clone(),
                    None => continue,
                },
                op => {
                    let op = op.clone();
                    self.eval(&op)
                        .map_err(|e| describe(e, NodeId(i), &op, self.nodes[i].label.as_deref()))?
                }
            };
            self.values[i] = value;
        }
        Ok(self.values.last().expect("non-empty"))
    }

    /// Reverse-mode accumulation from a scalar node. Every named leaf gets a
    /// gradient; leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, node #{} has shape {:?}",
                loss.0,
                self.values[loss.0].shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.values[loss.0].shape(), 1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                if let Some(name) = &node.label {
                    out.grads.insert(name.clone(), g);
                }
                continue;
            }
            self.propagate(&node.op, NodeId(i), &g, &mut grads);
        }
        for (name, &id) in &self.params {
            out.grads
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(self.values[id.0].shape()));
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&self, op: &Op, out_id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let v = |id: NodeId| &self.values[id.0];
        let out = &self.values[out_id.0];
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, n, p) = (v(*a).rows(), v(*a).cols(), v(*b).cols());
                if self.wants(*a) {
                    let da = matmul_nt(g.data(), v(*b).data(), m, n, p);
                    self.accumulate(grads, *a, shaped(v(*a), da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; n * p];
                    matmul_tn_acc(&mut db, v(*a).data(), g.data(), m, n, p);
                    self.accumulate(grads, *b, shaped(v(*b), db));
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*b) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for r in 0..g.rows() {
                        for (d, gv) in db.iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                    self.accumulate(grads, *b, shaped(v(*b), db));
                }
                self.accumulate(grads, *x, g.clone());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = g.data().iter().zip(v(*b).data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, shaped(v(*a), d));
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(v(*a).data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, shaped(v(*b), d));
                }
            }
            Op::Scale(a, f) => {
                let d = g.data().iter().map(|x| x * f).collect();
                self.accumulate(grads, *a, shaped(v(*a), d));
            }
            Op::Relu(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(v(*x).data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, shaped(v(*x), d));
            }
            Op::Sigmoid(x) => {
                let d = g.data().iter().zip(out.data()).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                self.accumulate(grads, *x, shaped(v(*x), d));
            }
            Op::Concat(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut start = 0;
                for part in parts {
                    let c = v(*part).cols();
                    if self.wants(*part) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + start..r * total + start + c]);
                        }
                        self.accumulate(grads, *part, shaped(v(*part), d));
                    }
                    start += c;
                }
            }
            Op::Gather(table, ids) => {
                if self.wants(*table) {
                    let t = v(*table);
                    let c = t.cols();
                    let mut d = vec![0.0; t.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for (dv, gv) in d[id * c..(id + 1) * c].iter_mut().zip(g.row(r)) {
                            *dv += gv;
                        }
                    }
                    self.accumulate(grads, *table, shaped(t, d));
                }
            }
            Op::SliceCols(x, start, len) => {
                let xv = v(*x);
                let c = xv.cols();
                let mut d = vec![0.0; xv.len()];
                for r in 0..xv.rows() {
                    d[r * c + start..r * c + start + len].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, shaped(xv, d));
            }
            Op::Softmax(x) => {
                let c = out.cols();
                let mut d = vec![0.0; out.len()];
                for r in 0..out.rows() {
                    softmax_backward(out.row(r), g.row(r), &mut d[r * c..(r + 1) * c]);
                }
                self.accumulate(grads, *x, shaped(v(*x), d));
            }
            Op::SegmentSoftmax(x, offsets) => {
                let mut d = vec![0.0; out.len()];
                for w in offsets.windows(2) {
                    let (s, e) = (w[0], w[1]);
                    softmax_backward(&out.data()[s..e], &g.data()[s..e], &mut d[s..e]);
                }
                self.accumulate(grads, *x, shaped(v(*x), d));
            }
            Op::SegmentWeightedSum(w, vals, offsets) => {
                let (wv, vv) = (v(*w), v(*vals));
                let dcols = vv.cols();
                let mut dw = vec![0.0; wv.len()];
                let mut dv = vec![0.0; vv.len()];
                for (seg, win) in offsets.windows(2).enumerate() {
                    let grow = g.row(seg);
                    for i in win[0]..win[1] {
                        let vrow = vv.row(i);
                        dw[i] = vrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        let wi = wv.data()[i];
                        for (o, gv) in dv[i * dcols..(i + 1) * dcols].iter_mut().zip(grow) {
                            *o = wi * gv;
                        }
                    }
                }
                self.accumulate(grads, *w, shaped(wv, dw));
                self.accumulate(grads, *vals, shaped(vv, dv));
            }
            Op::BlockScores(q, k, block, scale) => {
                let (qv, kv) = (v(*q), v(*k));
                let dim = qv.cols();
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                for r in 0..qv.rows() {
                    let base = (r / block) * block;
                    let grow = g.row(r);
                    let qrow = qv.row(r);
                    for j in 0..*block {
                        let gs = grow[j] * scale;
                        if gs == 0.0 {
                            continue;
                        }
                        let krow = kv.row(base + j);
                        for t in 0..dim {
                            dq[r * dim + t] += gs * krow[t];
                            dk[(base + j) * dim + t] += gs * qrow[t];
                        }
                    }
                }
                self.accumulate(grads, *q, shaped(qv, dq));
                self.accumulate(grads, *k, shaped(kv, dk));
            }
            Op::BlockApply(p, vals, block) => {
                let (pv, vv) = (v(*p), v(*vals));
                let dim = vv.cols();
                let mut dp = vec![0.0; pv.len()];
                let mut dv = vec![0.0; vv.len()];
                for r in 0..pv.rows() {
                    let base = (r / block) * block;
                    let grow = g.row(r);
                    for j in 0..*block {
                        let vrow = vv.row(base + j);
                        dp[r * block + j] = vrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        let pj = pv.data()[r * block + j];
                        for t in 0..dim {
                            dv[(base + j) * dim + t] += pj * grow[t];
                        }
                    }
                }
                self.accumulate(grads, *p, shaped(pv, dp));
                self.accumulate(grads, *vals, shaped(vv, dv));
            }
            Op::LayerNorm(x, gain, bias) => {
                let (xv, gv) = (v(*x), v(*gain));
                let n = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                let mut xhat = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    let (mean, inv) = row_moments(row);
                    let grow = g.row(r);
                    for t in 0..n {
                        xhat[t] = (row[t] - mean) * inv;
                        dxhat[t] = grow[t] * gv.data()[t];
                        dgain[t] += grow[t] * xhat[t];
                        dbias[t] += grow[t];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / n as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for t in 0..n {
                        dx[r * n + t] = inv * (dxhat[t] - m1 - xhat[t] * m2);
                    }
                }
                self.accumulate(grads, *x, shaped(xv, dx));
                self.accumulate(grads, *gain, shaped(gv, dgain));
                self.accumulate(grads, *bias, shaped(v(*bias), dbias));
            }
            Op::Bce(p, labels) => {
                let pv = v(*p);
                let n = labels.len() as f64;
                let gs = g.data()[0];
                let d = pv
                    .data()
                    .iter()
                    .zip(labels.iter())
                    .map(|(&pr, &y)| {
                        let pc = pr.clamp(P_CLAMP, 1.0 - P_CLAMP);
                        gs * (-y / pc + (1.0 - y) / (1.0 - pc)) / n
                    })
                    .collect();
                self.accumulate(grads, *p, shaped(pv, d));
            }
            Op::Sum(x) => {
                let gs = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(v(*x).shape(), gs));
            }
            Op::Mean(x) => {
                let gs = g.data()[0] / v(*x).len() as f64;
                self.accumulate(grads, *x, Tensor::full(v(*x).shape(), gs));
            }
        }
    }

    fn eval(&self, op: &Op) -> Result<Tensor> {
        let v = |id: &NodeId| &self.values[id.0];
        match op {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => {
                let (a, b) = (v(a), v(b));
                let (m, n) = (a.rows(), a.cols());
                if b.rows() != n || b.shape().len() != 2 {
                    return Err(mismatch("matmul", a, b));
                }
                let p = b.cols();
                Tensor::matrix(m, p, matmul(a.data(), b.data(), m, n, p))
            }
            Op::AddBias(x, b) => {
                let (x, b) = (v(x), v(b));
                if b.len() != x.cols() {
                    return Err(mismatch("add_bias", x, b));
                }
                let mut out = x.clone();
                let c = x.cols();
                for r in 0..x.rows() {
                    for (o, bv) in out.data_mut()[r * c..(r + 1) * c].iter_mut().zip(b.data()) {
                        *o += bv;
                    }
                }
                Ok(out)
            }
            Op::Add(a, b) | Op::Mul(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.shape() != b.shape() {
                    return Err(mismatch(op.name(), a, b));
                }
                let add = matches!(op, Op::Add(..));
                let d = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| if add { x + y } else { x * y })
                    .collect();
                Tensor::new(a.shape().to_vec(), d)
            }
            Op::Scale(a, f) => {
                let a = v(a);
                Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| x * f).collect())
            }
            Op::Relu(x) => {
                let x = v(x);
                Tensor::new(x.shape().to_vec(), x.data().iter().map(|&t| relu(t)).collect())
            }
            Op::Sigmoid(x) => {
                let x = v(x);
                Tensor::new(x.shape().to_vec(), x.data().iter().map(|&t| sigmoid(t)).collect())
            }
            Op::Concat(parts) => {
                if parts.is_empty() {
                    return Err(Error::usage("concat of nothing"));
                }
                let rows = v(&parts[0]).rows();
                if let Some(bad) = parts.iter().find(|p| v(p).rows() != rows) {
                    return Err(mismatch("concat", v(&parts[0]), v(bad)));
                }
                let total: usize = parts.iter().map(|p| v(p).cols()).sum();
                let mut d = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for p in parts {
                        d.extend_from_slice(v(p).row(r));
                    }
                }
                Tensor::matrix(rows, total, d)
            }
            Op::Gather(table, ids) => {
                let t = v(table);
                let (n, c) = (t.rows(), t.cols());
                let mut d = Vec::with_capacity(ids.len() * c);
                for &id in ids.iter() {
                    if id >= n {
                        return Err(Error::usage(format!("gather: id {id} out of range for {n} rows")));
                    }
                    d.extend_from_slice(t.row(id));
                }
                Tensor::matrix(ids.len(), c, d)
            }
            Op::SliceCols(x, start, len) => {
                let x = v(x);
                if start + len > x.cols() {
                    return Err(Error::usage(format!(
                        "slice_cols {start}..{} out of {} columns",
                        start + len,
                        x.cols()
                    )));
                }
                let mut d = Vec::with_capacity(x.rows() * len);
                for r in 0..x.rows() {
                    d.extend_from_slice(&x.row(r)[*start..start + len]);
                }
                Tensor::matrix(x.rows(), *len, d)
            }
            Op::Softmax(x) => {
                let x = v(x);
                if x.cols() == 0 {
                    return Err(Error::usage("softmax of an empty row"));
                }
                let mut d = x.data().to_vec();
                let c = x.cols();
                for r in 0..x.rows() {
                    softmax_in_place(&mut d[r * c..(r + 1) * c]);
                }
                Tensor::new(x.shape().to_vec(), d)
            }
            Op::SegmentSoftmax(x, offsets) => {
                let x = v(x);
                check_offsets(offsets, x.len())?;
                let mut d = x.data().to_vec();
                for w in offsets.windows(2) {
                    if w[1] > w[0] {
                        softmax_in_place(&mut d[w[0]..w[1]]);
                    }
                }
                Tensor::new(x.shape().to_vec(), d)
            }
            Op::SegmentWeightedSum(w, vals, offsets) => {
                let (w, vals) = (v(w), v(vals));
                if w.len() != vals.rows() {
                    return Err(mismatch("segment_weighted_sum", w, vals));
                }
                check_offsets(offsets, vals.rows())?;
                let c = vals.cols();
                let groups = offsets.len() - 1;
                let mut d = vec![0.0; groups * c];
                for (seg, win) in offsets.windows(2).enumerate() {
                    let orow = &mut d[seg * c..(seg + 1) * c];
                    for i in win[0]..win[1] {
                        let wi = w.data()[i];
                        for (o, x) in orow.iter_mut().zip(vals.row(i)) {
                            *o += wi * x;
                        }
                    }
                }
                Tensor::matrix(groups, c, d)
            }
            Op::BlockScores(q, k, block, scale) => {
                let (q, k) = (v(q), v(k));
                if q.shape() != k.shape() || *block == 0 || q.rows() % block != 0 {
                    return Err(mismatch("block_scores", q, k));
                }
                let rows = q.rows();
                let mut d = vec![0.0; rows * block];
                for r in 0..rows {
                    let base = (r / block) * block;
                    let qrow = q.row(r);
                    for j in 0..*block {
                        let dot: f64 = qrow.iter().zip(k.row(base + j)).map(|(a, b)| a * b).sum();
                        d[r * block + j] = dot * scale;
                    }
                }
                Tensor::matrix(rows, *block, d)
            }
            Op::BlockApply(p, vals, block) => {
                let (p, vals) = (v(p), v(vals));
                if p.rows() != vals.rows() || p.cols() != *block || vals.rows() % block != 0 {
                    return Err(mismatch("block_apply", p, vals));
                }
                let c = vals.cols();
                let mut d = vec![0.0; vals.rows() * c];
                for r in 0..p.rows() {
                    let base = (r / block) * block;
                    let orow = &mut d[r * c..(r + 1) * c];
                    for j in 0..*block {
                        let pj = p.get(r, j);
                        for (o, x) in orow.iter_mut().zip(vals.row(base + j)) {
                            *o += pj * x;
                        }
                    }
                }
                Tensor::matrix(vals.rows(), c, d)
            }
            Op::LayerNorm(x, gain, bias) => {
                let (x, gain, bias) = (v(x), v(gain), v(bias));
                if gain.len() != x.cols() || bias.len() != x.cols() {
                    return Err(mismatch("layer_norm", x, gain));
                }
                let c = x.cols();
                let mut d = vec![0.0; x.len()];
                for r in 0..x.rows() {
                    layer_norm_row(x.row(r), gain.data(), bias.data(), &mut d[r * c..(r + 1) * c]);
                }
                Tensor::new(x.shape().to_vec(), d)
            }
            Op::Bce(p, labels) => {
                let p = v(p);
                if p.len() != labels.len() || labels.is_empty() {
                    return Err(Error::usage(format!(
                        "bce: {} probabilities vs {} labels",
                        p.len(),
                        labels.len()
                    )));
                }
                let total: f64 = p.data().iter().zip(labels.iter()).map(|(&pr, &y)| cross_entropy(pr, y)).sum();
                Ok(Tensor::scalar(total / labels.len() as f64))
            }
            Op::Sum(x) => Ok(Tensor::scalar(v(x).data().iter().sum())),
            Op::Mean(x) => {
                let x = v(x);
                if x.is_empty() {
                    return Err(Error::usage("mean of an empty tensor"));
                }
                Ok(Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64))
            }
        }
    }
}

fn inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::AddBias(a, b)
        | Op::Add(a, b)
        | Op::Mul(a, b)
        | Op::SegmentWeightedSum(a, b, _)
        | Op::BlockScores(a, b, ..)
        | Op::BlockApply(a, b, _) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Gather(a, _)
        | Op::SliceCols(a, ..)
        | Op::Softmax(a)
        | Op::SegmentSoftmax(a, _)
        | Op::Bce(a, _)
        | Op::Sum(a)
        | Op::Mean(a) => vec![*a],
        Op::Concat(parts) => parts.clone(),
        Op::LayerNorm(x, g, b) => vec![*x, *g, *b],
    }
}

fn shaped(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(like.shape().to_vec(), data).expect("gradient shape equals value shape")
}

fn mismatch(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::usage(format!("{op}: incompatible shapes {:?} and {:?}", a.shape(), b.shape()))
}

fn describe(e: Error, id: NodeId, op: &Op, label: Option<&str>) -> Error {
    match e {
        Error::Usage(msg) => Error::Usage(format!(
            "node #{} ({}{}): {msg}",
            id.0,
            op.name(),
            label.map(|l| format!(" '{l}'")).unwrap_or_default()
        )),
        other => other,
    }
}

fn check_offsets(offsets: &[usize], n: usize) -> Result<()> {
    let ok = !offsets.is_empty()
        && offsets[0] == 0
        && *offsets.last().unwrap() == n
        && offsets.windows(2).all(|w| w[0] <= w[1]);
    if ok {
        Ok(())
    } else {
        Err(Error::usage(format!("segment offsets do not partition {n} rows")))
    }
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-sample binary cross-entropy with the probability clamped away from 0 and 1.
pub fn cross_entropy(p: f64, y: f64) -> f64 {
    let p = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in x.iter_mut() {
        *v /= total;
    }
}

fn softmax_backward(y: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, yv), gv) in out.iter_mut().zip(y).zip(g) {
        *o = yv * (gv - dot);
    }
}

/// Row mean and `1/sqrt(var + eps)` with population variance.
fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

pub(crate) fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], out: &mut [f64]) {
    let (mean, inv) = row_moments(x);
    for t in 0..x.len() {
        out[t] = gain[t] * (x[t] - mean) * inv + bias[t];
    }
}

/// Numerically stable softmax of a single vector.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::usage("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("softmax of non-finite logits"));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Layer normalization of one vector with learned gain and bias.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    if x.len() < 2 || gain.len() != x.len() || bias.len() != x.len() {
        return Err(Error::usage(format!(
            "layer_norm needs equal lengths >= 2, got {}/{}/{}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    let mut out = vec![0.0; x.len()];
    layer_norm_row(x, gain, bias, &mut out);
    Ok(out)
}
