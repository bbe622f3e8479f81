use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ConvGeom};
use super::{Tensor, DEGENERATE_NORM};
use crate::error::{Error, Result};

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds understood by [`Graph::forward_op`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    /// `a + b`; `b` may be a rank-1 bias broadcast over the rows of a matrix `a`.
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    MatMul,
    Transpose,
    Relu,
    /// Stride-1 convolution over `[B,C,H,W]` with kernel `[O,C,K,K]` and an
    /// optional per-channel bias `[O]` as third input.
    Conv2d { padding: usize },
    /// 2×2 window, stride 2.
    MaxPool2d,
    /// Inverted dropout; identity unless `train`.
    Dropout { p: f64, train: bool },
    /// `[B, ...]` to `[B, prod(...)]`.
    Flatten,
    Mean,
    Sum,
    Scale(f64),
    /// Row-wise softmax over the last axis of `[B,C]`.
    Softmax,
    /// Mean over rows of `-Σ y·log softmax(logits)`; inputs `(logits, targets)`.
    SoftmaxCrossEntropy,
    L2Norm,
    /// Cosine similarity of two vectors, or row-wise for two `[B,D]` matrices.
    CosineSimilarity,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Relu => "relu",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d => "maxpool2d",
            Op::Dropout { .. } => "dropout",
            Op::Flatten => "flatten",
            Op::Mean => "mean",
            Op::Sum => "sum",
            Op::Scale(_) => "scale",
            Op::Softmax => "softmax",
            Op::SoftmaxCrossEntropy => "softmax_cross_entropy",
            Op::L2Norm => "l2_norm",
            Op::CosineSimilarity => "cosine_similarity",
        }
    }

    fn arity(&self) -> std::ops::RangeInclusive<usize> {
        match self {
            Op::Add | Op::Sub | Op::Mul | Op::MatMul => 2..=2,
            Op::SoftmaxCrossEntropy | Op::CosineSimilarity => 2..=2,
            Op::Conv2d { .. } => 2..=3,
            _ => 1..=1,
        }
    }
}

#[derive(Clone, Debug)]
enum Kind {
    Leaf,
    Op(Op),
}

/// Per-node data saved during forward for use in backward.
#[derive(Clone, Debug)]
enum Saved {
    None,
    Indices(Vec<usize>),
    Mask(Vec<f64>),
    Probs(Vec<f64>),
    Degenerate(Vec<bool>),
}

#[derive(Clone, Debug)]
struct Node {
    kind: Kind,
    parents: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
    saved: Saved,
}

/// Gradients of a backward pass, keyed by leaf node.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_leaf: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_leaf.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.by_leaf.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

/// Append-only computation tape.
///
/// Values are computed eagerly when a node is added. A graph supports one
/// backward pass; build a new graph for the next evaluation.
#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    rng: ChaCha8Rng,
    backward_done: bool,
}

impl Graph {
    /// New empty graph; `seed` drives dropout masks only.
    pub fn new(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf whose gradient is tracked.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Adds a leaf treated as a constant (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            kind: Kind::Leaf,
            parents: Vec::new(),
            value,
            requires_grad,
            saved: Saved::None,
        });
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Number of degenerate (zero-norm) rows seen by a cosine similarity node.
    pub fn degenerate_count(&self, id: NodeId) -> usize {
        match &self.nodes[id.0].saved {
            Saved::Degenerate(flags) => flags.iter().filter(|&&d| d).count(),
            _ => 0,
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(Op::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Transpose, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Relu, &[a])
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        padding: usize,
    ) -> Result<NodeId> {
        match bias {
            Some(b) => self.forward_op(Op::Conv2d { padding }, &[x, kernel, b]),
            None => self.forward_op(Op::Conv2d { padding }, &[x, kernel]),
        }
    }

    pub fn maxpool2d(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(Op::MaxPool2d, &[x])
    }

    pub fn dropout(&mut self, x: NodeId, p: f64, train: bool) -> Result<NodeId> {
        self.forward_op(Op::Dropout { p, train }, &[x])
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Flatten, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Mean, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Sum, &[x])
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> Result<NodeId> {
        self.forward_op(Op::Scale(k), &[x])
    }

    pub fn softmax(&mut self, logits: NodeId) -> Result<NodeId> {
        self.forward_op(Op::Softmax, &[logits])
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        self.forward_op(Op::SoftmaxCrossEntropy, &[logits, targets])
    }

    pub fn l2_norm(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(Op::L2Norm, &[x])
    }

    pub fn cosine_similarity(&mut self, u: NodeId, v: NodeId) -> Result<NodeId> {
        self.forward_op(Op::CosineSimilarity, &[u, v])
    }

    /// Applies `op` to `inputs` and appends the result.
    pub fn forward_op(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if !op.arity().contains(&inputs.len()) {
            return Err(Error::Arity {
                op: op.name(),
                got: inputs.len(),
            });
        }
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::UnknownNode(bad.0));
        }
        let (value, saved) = self.compute(op, inputs)?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: op.name(),
            });
        }
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            kind: Kind::Op(op),
            parents: inputs.to_vec(),
            value,
            requires_grad,
            saved,
        });
        Ok(id)
    }

    fn compute(&mut self, op: Op, inputs: &[NodeId]) -> Result<(Tensor, Saved)> {
        let v = |i: usize| &self.nodes[inputs[i].0].value;
        let mismatch = |a: &Tensor, b: &Tensor| Error::ShapeMismatch {
            op: op.name(),
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        let out = match op {
            Op::Add => {
                let (a, b) = (v(0), v(1));
                if a.shape() == b.shape() {
                    a.zip_map(b, |x, y| x + y)
                } else if is_row_bias(a, b) {
                    let cols = b.numel();
                    let mut out = a.clone();
                    for row in out.data_mut().chunks_mut(cols) {
                        for (o, &bv) in row.iter_mut().zip(b.data()) {
                            *o += bv;
                        }
                    }
                    out
                } else {
                    return Err(mismatch(a, b));
                }
            }
            Op::Sub | Op::Mul => {
                let (a, b) = (v(0), v(1));
                if a.shape() != b.shape() {
                    return Err(mismatch(a, b));
                }
                if op == Op::Sub {
                    a.zip_map(b, |x, y| x - y)
                } else {
                    a.zip_map(b, |x, y| x * y)
                }
            }
            Op::MatMul => {
                let (a, b) = (v(0), v(1));
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(mismatch(a, b));
                }
                a.matmul(b)?
            }
            Op::Transpose => v(0).transpose()?,
            Op::Relu => v(0).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::Conv2d { padding } => return self.conv2d_forward(inputs, padding),
            Op::MaxPool2d => {
                let x = v(0);
                let s = x.shape();
                if s.len() != 4 || s[2] < 2 || s[3] < 2 {
                    return Err(Error::InvalidShape {
                        shape: s.to_vec(),
                        reason: "maxpool2d needs [B,C,H,W] with H,W >= 2",
                    });
                }
                let (h, w) = (s[2], s[3]);
                let (out, arg) = kernels::maxpool2(x.data(), s[0] * s[1], h, w);
                let t = Tensor::new(vec![s[0], s[1], h / 2, w / 2], out)?;
                return Ok((t, Saved::Indices(arg)));
            }
            Op::Dropout { p, train } => {
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::InvalidArgument(format!(
                        "dropout probability {p} outside [0, 1)"
                    )));
                }
                if !train || p == 0.0 {
                    v(0).clone()
                } else {
                    let keep = 1.0 / (1.0 - p);
                    let n = v(0).numel();
                    let mask: Vec<f64> = (0..n)
                        .map(|_| {
                            if self.rng.random::<f64>() >= p {
                                keep
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    let x = &self.nodes[inputs[0].0].value;
                    let mut out = x.clone();
                    for (o, m) in out.data_mut().iter_mut().zip(&mask) {
                        *o *= m;
                    }
                    return Ok((out, Saved::Mask(mask)));
                }
            }
            Op::Flatten => {
                let x = v(0);
                let b = x.shape()[0];
                x.reshape(vec![b, x.numel() / b])?
            }
            Op::Mean => Tensor::scalar(v(0).sum() / v(0).numel() as f64),
            Op::Sum => Tensor::scalar(v(0).sum()),
            Op::Scale(k) => v(0).scale(k),
            Op::Softmax => {
                let x = v(0);
                if x.rank() != 2 {
                    return Err(Error::InvalidShape {
                        shape: x.shape().to_vec(),
                        reason: "softmax needs [B,C]",
                    });
                }
                let cols = x.shape()[1];
                let mut out = x.clone();
                for row in out.data_mut().chunks_mut(cols) {
                    softmax_in_place(row);
                }
                out
            }
            Op::SoftmaxCrossEntropy => {
                let (logits, targets) = (v(0), v(1));
                if logits.rank() != 2 || logits.shape() != targets.shape() {
                    return Err(mismatch(logits, targets));
                }
                let (b, c) = (logits.shape()[0], logits.shape()[1]);
                let mut probs = logits.data().to_vec();
                let mut total = 0.0;
                for (i, row) in probs.chunks_mut(c).enumerate() {
                    let lse = softmax_in_place(row);
                    let logit_row = logits.row(i);
                    let target_row = targets.row(i);
                    for j in 0..c {
                        if target_row[j] != 0.0 {
                            total -= target_row[j] * (logit_row[j] - lse);
                        }
                    }
                }
                return Ok((Tensor::scalar(total / b as f64), Saved::Probs(probs)));
            }
            Op::L2Norm => Tensor::scalar(v(0).l2_norm()),
            Op::CosineSimilarity => {
                let (u, w) = (v(0), v(1));
                if u.shape() != w.shape() || u.rank() > 2 {
                    return Err(mismatch(u, w));
                }
                let (rows, cols) = if u.rank() == 1 {
                    (1, u.numel())
                } else {
                    (u.shape()[0], u.shape()[1])
                };
                let mut vals = Vec::with_capacity(rows);
                let mut degenerate = Vec::with_capacity(rows);
                for (ur, wr) in u.data().chunks(cols).zip(w.data().chunks(cols)) {
                    let c = super::cosine(ur, wr);
                    vals.push(c.value);
                    degenerate.push(c.degenerate);
                }
                return Ok((Tensor::vector(vals), Saved::Degenerate(degenerate)));
            }
        };
        Ok((out, Saved::None))
    }

    fn conv2d_forward(&self, inputs: &[NodeId], padding: usize) -> Result<(Tensor, Saved)> {
        let x = &self.nodes[inputs[0].0].value;
        let w = &self.nodes[inputs[1].0].value;
        let (g, out_ch) = conv_geometry(x, w, padding)?;
        if let Some(b) = inputs.get(2) {
            let b = &self.nodes[b.0].value;
            if b.shape() != [out_ch] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: w.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let batch = x.shape()[0];
        let (oh, ow) = (g.out_h(), g.out_w());
        let plane = oh * ow;
        let img_len = g.channels * g.height * g.width;
        let mut cols = vec![0.0; g.col_rows() * plane];
        let mut out = vec![0.0; batch * out_ch * plane];
        for n in 0..batch {
            kernels::im2col(&x.data()[n * img_len..(n + 1) * img_len], g, &mut cols);
            let dst = &mut out[n * out_ch * plane..(n + 1) * out_ch * plane];
            kernels::gemm(w.data(), &cols, dst, out_ch, g.col_rows(), plane);
            if let Some(b) = inputs.get(2) {
                let b = &self.nodes[b.0].value;
                for (o, chunk) in dst.chunks_mut(plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += b.data()[o]);
                }
            }
        }
        Ok((
            Tensor::new(vec![batch, out_ch, oh, ow], out)?,
            Saved::None,
        ))
    }

    /// Reverse-mode pass from a scalar `root`; returns gradients of every
    /// tracked leaf that is an ancestor of `root`.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if root.0 >= self.nodes.len() {
            return Err(Error::UnknownNode(root.0));
        }
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::NonScalarRoot(self.nodes[root.0].value.shape().to_vec()));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let op = match &node.kind {
                Kind::Leaf => {
                    if !g.is_finite() {
                        return Err(Error::NonFinite {
                            context: "backward",
                        });
                    }
                    out.by_leaf.insert(NodeId(idx), g);
                    continue;
                }
                Kind::Op(op) => *op,
            };
            let contributions = self.vjp(idx, op, &g)?;
            for (parent, contrib) in node.parents.iter().zip(contributions) {
                let Some(contrib) = contrib else { continue };
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.axpy(1.0, &contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(out)
    }

    /// Vector-Jacobian product of node `idx` for upstream gradient `g`.
    fn vjp(&self, idx: usize, op: Op, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let node = &self.nodes[idx];
        let parent = |i: usize| &self.nodes[node.parents[i].0];
        let wants = |i: usize| parent(i).requires_grad;
        let res = match op {
            Op::Add => {
                let (a, b) = (&parent(0).value, &parent(1).value);
                let gb = if a.shape() == b.shape() {
                    g.clone()
                } else {
                    let cols = b.numel();
                    let mut acc = vec![0.0; cols];
                    for row in g.data().chunks(cols) {
                        for (s, &v) in acc.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    Tensor::new(b.shape().to_vec(), acc)?
                };
                vec![Some(g.clone()), Some(gb)]
            }
            Op::Sub => vec![Some(g.clone()), Some(g.scale(-1.0))],
            Op::Mul => {
                let (a, b) = (&parent(0).value, &parent(1).value);
                vec![
                    wants(0).then(|| g.zip_map(b, |x, y| x * y)),
                    wants(1).then(|| g.zip_map(a, |x, y| x * y)),
                ]
            }
            Op::MatMul => {
                let (a, b) = (&parent(0).value, &parent(1).value);
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let ga = wants(0).then(|| {
                    let mut out = vec![0.0; m * k];
                    kernels::gemm_nt_acc(g.data(), b.data(), &mut out, m, n, k);
                    Tensor::new(vec![m, k], out)
                });
                let gb = wants(1).then(|| {
                    let mut out = vec![0.0; k * n];
                    kernels::gemm_tn_acc(a.data(), g.data(), &mut out, k, m, n);
                    Tensor::new(vec![k, n], out)
                });
                vec![ga.transpose()?, gb.transpose()?]
            }
            Op::Transpose => vec![Some(g.transpose()?)],
            Op::Relu => {
                let x = &parent(0).value;
                vec![Some(g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }))]
            }
            Op::Conv2d { padding } => self.conv2d_backward(node, g, padding)?,
            Op::MaxPool2d => {
                let x = &parent(0).value;
                let Saved::Indices(arg) = &node.saved else {
                    unreachable!("maxpool saves indices")
                };
                let mut gx = Tensor::zeros(x.shape());
                for (&src, &gv) in arg.iter().zip(g.data()) {
                    gx.data_mut()[src] += gv;
                }
                vec![Some(gx)]
            }
            Op::Dropout { .. } => match &node.saved {
                Saved::Mask(mask) => {
                    let mut gx = g.clone();
                    for (o, m) in gx.data_mut().iter_mut().zip(mask) {
                        *o *= m;
                    }
                    vec![Some(gx)]
                }
                _ => vec![Some(g.clone())],
            },
            Op::Flatten => vec![Some(g.reshape(parent(0).value.shape().to_vec())?)],
            Op::Mean => {
                let x = &parent(0).value;
                let k = g.item() / x.numel() as f64;
                vec![Some(Tensor::full(x.shape(), k))]
            }
            Op::Sum => vec![Some(Tensor::full(parent(0).value.shape(), g.item()))],
            Op::Scale(k) => vec![Some(g.scale(k))],
            Op::Softmax => {
                let p = &node.value;
                let cols = p.shape()[1];
                let mut gx = g.clone();
                for (grow, prow) in gx.data_mut().chunks_mut(cols).zip(p.data().chunks(cols)) {
                    let dot: f64 = grow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for (gv, &pv) in grow.iter_mut().zip(prow) {
                        *gv = pv * (*gv - dot);
                    }
                }
                vec![Some(gx)]
            }
            Op::SoftmaxCrossEntropy => {
                let (logits, targets) = (&parent(0).value, &parent(1).value);
                let Saved::Probs(probs) = &node.saved else {
                    unreachable!("cross entropy saves probabilities")
                };
                let (b, c) = (logits.shape()[0], logits.shape()[1]);
                let scale = g.item() / b as f64;
                let gl = wants(0).then(|| {
                    let mut out = vec![0.0; b * c];
                    for i in 0..b * c {
                        out[i] = scale * (probs[i] - targets.data()[i]);
                    }
                    Tensor::new(vec![b, c], out)
                });
                let gt = wants(1).then(|| {
                    let mut out = vec![0.0; b * c];
                    for i in 0..b * c {
                        out[i] = -scale * probs[i].ln();
                    }
                    Tensor::new(vec![b, c], out)
                });
                vec![gl.transpose()?, gt.transpose()?]
            }
            Op::L2Norm => {
                let x = &parent(0).value;
                let norm = node.value.item();
                if norm == 0.0 {
                    vec![Some(Tensor::zeros(x.shape()))]
                } else {
                    vec![Some(x.scale(g.item() / norm))]
                }
            }
            Op::CosineSimilarity => {
                let (u, w) = (&parent(0).value, &parent(1).value);
                let cols = if u.rank() == 1 { u.numel() } else { u.shape()[1] };
                let mut gu = Tensor::zeros(u.shape());
                let mut gw = Tensor::zeros(w.shape());
                let rows = u.numel() / cols;
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let (ur, wr) = (&u.data()[span.clone()], &w.data()[span.clone()]);
                    let nu = ur.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let nw = wr.iter().map(|a| a * a).sum::<f64>().sqrt();
                    if nu < DEGENERATE_NORM || nw < DEGENERATE_NORM {
                        continue;
                    }
                    let c = ur.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>() / (nu * nw);
                    let gr = g.data()[r];
                    let inv = 1.0 / (nu * nw);
                    for j in 0..cols {
                        gu.data_mut()[span.start + j] =
                            gr * (wr[j] * inv - c * ur[j] / (nu * nu));
                        gw.data_mut()[span.start + j] =
                            gr * (ur[j] * inv - c * wr[j] / (nw * nw));
                    }
                }
                vec![Some(gu), Some(gw)]
            }
        };
        Ok(res)
    }

    fn conv2d_backward(&self, node: &Node, g: &Tensor, padding: usize) -> Result<Vec<Option<Tensor>>> {
        let xn = &self.nodes[node.parents[0].0];
        let wn = &self.nodes[node.parents[1].0];
        let (x, w) = (&xn.value, &wn.value);
        let (geom, out_ch) = conv_geometry(x, w, padding)?;
        let batch = x.shape()[0];
        let plane = geom.out_h() * geom.out_w();
        let img_len = geom.channels * geom.height * geom.width;
        let rows = geom.col_rows();

        let mut gw = vec![0.0; w.numel()];
        let mut gx = vec![0.0; x.numel()];
        let mut cols = vec![0.0; rows * plane];
        let mut gcols = vec![0.0; rows * plane];
        for n in 0..batch {
            let gout = &g.data()[n * out_ch * plane..(n + 1) * out_ch * plane];
            if wn.requires_grad {
                kernels::im2col(&x.data()[n * img_len..(n + 1) * img_len], geom, &mut cols);
                kernels::gemm_nt_acc(gout, &cols, &mut gw, out_ch, plane, rows);
            }
            if xn.requires_grad {
                gcols.iter_mut().for_each(|v| *v = 0.0);
                kernels::gemm_tn_acc(w.data(), gout, &mut gcols, rows, out_ch, plane);
                kernels::col2im_acc(&gcols, geom, &mut gx[n * img_len..(n + 1) * img_len]);
            }
        }
        let mut res = vec![
            Some(Tensor::new(x.shape().to_vec(), gx)?),
            Some(Tensor::new(w.shape().to_vec(), gw)?),
        ];
        if node.parents.len() == 3 {
            let mut gb = vec![0.0; out_ch];
            for n in 0..batch {
                for (o, acc) in gb.iter_mut().enumerate() {
                    let start = (n * out_ch + o) * plane;
                    *acc += g.data()[start..start + plane].iter().sum::<f64>();
                }
            }
            res.push(Some(Tensor::vector(gb)));
        }
        Ok(res)
    }
}

fn is_row_bias(a: &Tensor, b: &Tensor) -> bool {
    a.rank() == 2 && b.rank() == 1 && a.shape()[1] == b.numel()
}

/// In-place stabilized softmax; returns the log-sum-exp of the input row.
fn softmax_in_place(row: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
    max + z.ln()
}

fn conv_geometry(x: &Tensor, w: &Tensor, padding: usize) -> Result<(ConvGeom, usize)> {
    let (xs, ws) = (x.shape(), w.shape());
    let ok = xs.len() == 4
        && ws.len() == 4
        && xs[1] == ws[1]
        && ws[2] == ws[3]
        && xs[2] + 2 * padding >= ws[2]
        && xs[3] + 2 * padding >= ws[3];
    if !ok {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    Ok((
        ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            padding,
        },
        ws[0],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_example() {
        let mut g = Graph::new(0);
        let x = g.input(Tensor::vector(vec![-1.0, 0.0, 2.5]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.5]);
    }

    #[test]
    fn cross_entropy_uniform_is_ln3() {
        let mut g = Graph::new(0);
        let logits = g.input(Tensor::zeros(&[1, 3]));
        let y = g.constant(Tensor::one_hot(&[1], 3).unwrap());
        let loss = g.softmax_cross_entropy(logits, y).unwrap();
        assert!((g.value(loss).item() - 1.0986122886681098).abs() < 1e-15);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new(0);
        let x = g.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn self_cosine_has_zero_gradient() {
        let mut g = Graph::new(0);
        let u = g.input(Tensor::vector(vec![0.3, -1.7, 2.2, 0.05]));
        let c = g.cosine_similarity(u, u).unwrap();
        let grads = g.backward(c).unwrap();
        assert!(grads.get(u).unwrap().data().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new(0);
        let x = g.input(Tensor::scalar(2.0));
        let y = g.scale(x, 3.0).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::BackwardTwice)));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new(0);
        let x = g.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn eval_dropout_is_identity() {
        let mut g = Graph::new(9);
        let x = g.input(Tensor::vector(vec![1.0, -2.0, 3.0, 4.0]));
        let y = g.dropout(x, 0.5, false).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn train_dropout_scales_survivors() {
        let mut g = Graph::new(3);
        let x = g.input(Tensor::full(&[1000], 1.0));
        let y = g.dropout(x, 0.25, true).unwrap();
        for &v in g.value(y).data() {
            assert!(v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15);
        }
    }

    #[test]
    fn bias_broadcast_and_shape_errors() {
        let mut g = Graph::new(0);
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let bad = g.input(Tensor::vector(vec![1.0, 2.0]));
        let err = g.add(a, bad).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { op: "add", .. }));
    }

    #[test]
    fn cross_entropy_gradient_rows_sum_to_zero() {
        let mut g = Graph::new(0);
        let logits = g.input(
            Tensor::matrix(2, 3, vec![0.3, -2.0, 5.0, 1.0, 1.0, -0.5]).unwrap(),
        );
        let y = g.constant(Tensor::one_hot(&[0, 2], 3).unwrap());
        let loss = g.softmax_cross_entropy(logits, y).unwrap();
        assert!(g.value(loss).item() >= 0.0);
        let grads = g.backward(loss).unwrap();
        for row in grads.get(logits).unwrap().data().chunks(3) {
            assert!(row.iter().sum::<f64>().abs() < 1e-10);
        }
    }
}
