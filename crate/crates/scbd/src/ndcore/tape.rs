//! The reverse-mode tape: op recording, forward execution, backward rules.

use std::collections::HashMap;

use super::array::Array;
use super::kernels as k;
use super::scalar::Scalar;
use super::NdError;

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    StopGradient,
    Matmul,
    Add,
    Sub,
    Mul,
    AddScalar(f32),
    MulScalar(f32),
    AddRowVec,
    Exp,
    Log,
    Abs,
    Gelu,
    RowLogSoftmax,
    RowL2Normalize,
    Sum,
    Mean,
    SumAxis(usize),
    MeanAxis(usize),
    Reshape(Vec<usize>),
    Transpose2d,
    Conv2d {
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        stride: usize,
        pad: usize,
        out_pad: usize,
    },
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::StopGradient => "stop_gradient",
        Op::Matmul => "matmul",
        Op::Add => "add",
        Op::Sub => "sub",
        Op::Mul => "mul",
        Op::AddScalar(_) => "add_scalar",
        Op::MulScalar(_) => "mul_scalar",
        Op::AddRowVec => "add_row_vec",
        Op::Exp => "exp",
        Op::Log => "log",
        Op::Abs => "abs",
        Op::Gelu => "gelu",
        Op::RowLogSoftmax => "row_log_softmax",
        Op::RowL2Normalize => "l2_normalize_rows",
        Op::Sum => "sum",
        Op::Mean => "mean",
        Op::SumAxis(_) => "sum_axis",
        Op::MeanAxis(_) => "mean_axis",
        Op::Reshape(_) => "reshape",
        Op::Transpose2d => "transpose2d",
        Op::Conv2d { .. } => "conv2d",
        Op::ConvTranspose2d { .. } => "conv_transpose2d",
    }
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Array,
    requires_grad: bool,
}

/// Gradient table produced by [`Tape::backward`], indexed by [`NodeId`].
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the node's value, if one was computed.
    ///
    /// Leaves created with `requires_grad` always have an entry (zero if the
    /// loss does not depend on them); other nodes may return `None`.
    pub fn get(&self, id: NodeId) -> Option<&Array> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// An append-only recording of array ops supporting one-pass reverse sweeps.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// True when nothing has been recorded yet.
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The value held at `id`.
    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    /// Records an input array. Its `requires_grad` flag decides whether
    /// `backward` will report a gradient for it.
    pub fn leaf(&mut self, value: Array) -> NodeId {
        let requires_grad = value.requires_grad();
        self.push(Op::Leaf, vec![], value, requires_grad)
    }

    /// Identity in the forward pass; blocks all gradient flow in reverse.
    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.clone();
        self.push(Op::StopGradient, vec![a], value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NdError> {
        self.record(Op::Matmul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NdError> {
        self.record(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NdError> {
        self.record(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NdError> {
        self.record(Op::Mul, &[a, b])
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f32) -> Result<NodeId, NdError> {
        self.record(Op::AddScalar(c), &[a])
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f32) -> Result<NodeId, NdError> {
        self.record(Op::MulScalar(c), &[a])
    }

    /// Adds a length-`d` bias row to every row of an `n×d` matrix.
    pub fn add_row_vec(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, NdError> {
        self.record(Op::AddRowVec, &[x, b])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, NdError> {
        self.record(Op::Exp, &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, NdError> {
        self.record(Op::Log, &[a])
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId, NdError> {
        self.record(Op::Abs, &[a])
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId, NdError> {
        self.record(Op::Gelu, &[a])
    }

    /// Numerically stabilised log-softmax along each row of an `n×d` matrix.
    pub fn row_log_softmax(&mut self, a: NodeId) -> Result<NodeId, NdError> {
        self.record(Op::RowLogSoftmax, &[a])
    }

    /// L2-normalises each row of an `n×d` matrix (epsilon-guarded).
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId, NdError> {
        self.record(Op::RowL2Normalize, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, NdError> {
        self.record(Op::Sum, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, NdError> {
        self.record(Op::Mean, &[a])
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId, NdError> {
        self.record(Op::SumAxis(axis), &[a])
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId, NdError> {
        self.record(Op::MeanAxis(axis), &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, NdError> {
        self.record(Op::Reshape(shape.to_vec()), &[a])
    }

    pub fn transpose2d(&mut self, a: NodeId) -> Result<NodeId, NdError> {
        self.record(Op::Transpose2d, &[a])
    }

    /// 2-D convolution: `x [n,c,h,w]`, `w [oc,c,kh,kw]`, `b [oc]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, NdError> {
        self.record(Op::Conv2d { stride, pad }, &[x, w, b])
    }

    /// Transposed 2-D convolution: `x [n,ic,h,w]`, `w [ic,oc,kh,kw]`, `b [oc]`.
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<NodeId, NdError> {
        self.record(
            Op::ConvTranspose2d {
                stride,
                pad,
                out_pad,
            },
            &[x, w, b],
        )
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Array, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        id
    }

    fn record(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId, NdError> {
        let in_shapes: Vec<&[usize]> = inputs.iter().map(|id| self.nodes[id.0].value.shape()).collect();
        let out_shape = infer_shape(&op, &in_shapes)?;
        let data = {
            let ins: Vec<(&[f32], &[usize])> = inputs
                .iter()
                .map(|id| {
                    let node = &self.nodes[id.0];
                    (node.value.data(), node.value.shape())
                })
                .collect();
            exec::<f32>(&op, &ins, &out_shape)
        };
        if !data.iter().all(|v| v.is_finite()) {
            return Err(NdError::NonFinite { op: op_name(&op) });
        }
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        let value = Array::from_parts(out_shape, data);
        Ok(self.push(op, inputs.to_vec(), value, requires_grad))
    }

    /// Reverse sweep from a scalar `loss`. Visits each recorded op at most
    /// once, in reverse recording order; the result is bit-identical across
    /// repeated calls on the same tape.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NdError> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(NdError::NonScalarLoss {
                shape: loss_node.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].clone() else {
                continue;
            };
            self.backward_step(idx, &g, &mut grads);
            if !matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = None; // free intermediates; only leaves are reported
            }
        }
        let out = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                let held = grads[i].take();
                match (&node.op, held) {
                    (Op::Leaf, Some(g)) if node.requires_grad => {
                        Some(Array::from_parts(node.value.shape().to_vec(), g))
                    }
                    // A requires-grad leaf the loss never touched: zero grad.
                    (Op::Leaf, None) if node.requires_grad => {
                        Some(Array::zeros(node.value.shape()))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn backward_step(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        let input_value = |slot: usize| &self.nodes[node.inputs[slot].0].value;
        let needs = |slot: usize| self.nodes[node.inputs[slot].0].requires_grad;
        let mut send = |slot: usize, contribution: Vec<f32>| {
            accumulate(&mut grads[node.inputs[slot].0], contribution);
        };
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Matmul => {
                let a = input_value(0);
                let b = input_value(1);
                let (m, kk) = (a.dim(0), a.dim(1));
                let n = b.dim(1);
                if needs(0) {
                    let bt = k::transpose(b.data(), kk, n);
                    send(0, k::matmul(g, &bt, m, n, kk));
                }
                if needs(1) {
                    let at = k::transpose(a.data(), m, kk);
                    send(1, k::matmul(&at, g, kk, m, n));
                }
            }
            Op::Add => {
                if needs(0) {
                    send(0, g.to_vec());
                }
                if needs(1) {
                    send(1, g.to_vec());
                }
            }
            Op::Sub => {
                if needs(0) {
                    send(0, g.to_vec());
                }
                if needs(1) {
                    send(1, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul => {
                if needs(0) {
                    send(0, k::ew_mul(g, input_value(1).data()));
                }
                if needs(1) {
                    send(1, k::ew_mul(g, input_value(0).data()));
                }
            }
            Op::AddScalar(_) => {
                if needs(0) {
                    send(0, g.to_vec());
                }
            }
            Op::MulScalar(c) => {
                if needs(0) {
                    send(0, k::mul_scalar(g, *c));
                }
            }
            Op::AddRowVec => {
                let x = input_value(0);
                let (n, d) = (x.dim(0), x.dim(1));
                if needs(0) {
                    send(0, g.to_vec());
                }
                if needs(1) {
                    send(1, k::reduce_axis(g, &[n, d], 0, false));
                }
            }
            Op::Exp => {
                if needs(0) {
                    send(0, k::ew_mul(g, node.value.data()));
                }
            }
            Op::Log => {
                if needs(0) {
                    let x = input_value(0).data();
                    send(0, g.iter().zip(x).map(|(&gv, &xv)| gv / xv).collect());
                }
            }
            Op::Abs => {
                if needs(0) {
                    let x = input_value(0).data();
                    send(
                        0,
                        g.iter()
                            .zip(x)
                            .map(|(&gv, &xv)| {
                                if xv > 0.0 {
                                    gv
                                } else if xv < 0.0 {
                                    -gv
                                } else {
                                    0.0
                                }
                            })
                            .collect(),
                    );
                }
            }
            Op::Gelu => {
                if needs(0) {
                    let x = input_value(0).data();
                    send(
                        0,
                        g.iter()
                            .zip(x)
                            .map(|(&gv, &xv)| (gv as f64 * k::gelu_grad_f64(xv as f64)) as f32)
                            .collect(),
                    );
                }
            }
            Op::RowLogSoftmax => {
                if needs(0) {
                    let out = node.value.data();
                    let (n, d) = (node.value.dim(0), node.value.dim(1));
                    let mut dx = vec![0.0f32; n * d];
                    for r in 0..n {
                        let gr = &g[r * d..(r + 1) * d];
                        let or = &out[r * d..(r + 1) * d];
                        let gsum: f64 = gr.iter().map(|&v| v as f64).sum();
                        for j in 0..d {
                            dx[r * d + j] =
                                (gr[j] as f64 - (or[j] as f64).exp() * gsum) as f32;
                        }
                    }
                    send(0, dx);
                }
            }
            Op::RowL2Normalize => {
                if needs(0) {
                    let x = input_value(0);
                    let (n, d) = (x.dim(0), x.dim(1));
                    let xd = x.data();
                    let mut dx = vec![0.0f32; n * d];
                    for r in 0..n {
                        let xr = &xd[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut q = 0.0f64;
                        let mut dot = 0.0f64;
                        for j in 0..d {
                            q += xr[j] as f64 * xr[j] as f64;
                            dot += xr[j] as f64 * gr[j] as f64;
                        }
                        let nrm = (q + k::L2_EPS).sqrt();
                        let n3 = nrm * nrm * nrm;
                        for j in 0..d {
                            dx[r * d + j] =
                                (gr[j] as f64 / nrm - xr[j] as f64 * dot / n3) as f32;
                        }
                    }
                    send(0, dx);
                }
            }
            Op::Sum => {
                if needs(0) {
                    send(0, vec![g[0]; input_value(0).len()]);
                }
            }
            Op::Mean => {
                if needs(0) {
                    let len = input_value(0).len();
                    send(0, vec![(g[0] as f64 / len as f64) as f32; len]);
                }
            }
            Op::SumAxis(axis) | Op::MeanAxis(axis) => {
                if needs(0) {
                    let x = input_value(0);
                    let shape = x.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let mid = shape[*axis];
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let scale = if matches!(node.op, Op::MeanAxis(_)) {
                        1.0 / mid as f64
                    } else {
                        1.0
                    };
                    let mut dx = vec![0.0f32; x.len()];
                    for o in 0..outer {
                        let grow = &g[o * inner..(o + 1) * inner];
                        for m in 0..mid {
                            let base = (o * mid + m) * inner;
                            for (dst, &gv) in dx[base..base + inner].iter_mut().zip(grow) {
                                *dst = (gv as f64 * scale) as f32;
                            }
                        }
                    }
                    send(0, dx);
                }
            }
            Op::Reshape(_) => {
                if needs(0) {
                    send(0, g.to_vec());
                }
            }
            Op::Transpose2d => {
                if needs(0) {
                    let (r, c) = (node.value.dim(0), node.value.dim(1));
                    send(0, k::transpose(g, r, c));
                }
            }
            Op::Conv2d { stride, pad } => {
                let x = input_value(0);
                let w = input_value(1);
                let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
                let (oc, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
                let (oh, ow) = (node.value.dim(2), node.value.dim(3));
                let kdim = c * kh * kw;
                let m = oh * ow;
                let wt = if needs(0) {
                    Some(k::transpose(w.data(), oc, kdim))
                } else {
                    None
                };
                let mut dx = if needs(0) { Some(vec![0.0f32; x.len()]) } else { None };
                let mut dw = if needs(1) { Some(vec![0.0f64; w.len()]) } else { None };
                let mut db = if needs(2) { Some(vec![0.0f64; oc]) } else { None };
                for im in 0..n {
                    let dout_n = &g[im * oc * m..(im + 1) * oc * m];
                    if let (Some(wt), Some(dx)) = (wt.as_ref(), dx.as_mut()) {
                        let dcols = k::matmul(wt, dout_n, kdim, oc, m);
                        let img = &mut dx[im * c * h * wd..(im + 1) * c * h * wd];
                        k::fold_add(&dcols, img, c, h, wd, kh, kw, *stride, *pad, oh, ow);
                    }
                    if let Some(dw) = dw.as_mut() {
                        let x_n = &x.data()[im * c * h * wd..(im + 1) * c * h * wd];
                        let cols = k::unfold(x_n, c, h, wd, kh, kw, *stride, *pad, oh, ow);
                        let cols_t = k::transpose(&cols, kdim, m);
                        let prod = k::matmul(dout_n, &cols_t, oc, m, kdim);
                        for (slot, &v) in dw.iter_mut().zip(&prod) {
                            *slot += v as f64;
                        }
                    }
                    if let Some(db) = db.as_mut() {
                        for ocx in 0..oc {
                            let mut s = 0.0f64;
                            for &v in &dout_n[ocx * m..(ocx + 1) * m] {
                                s += v as f64;
                            }
                            db[ocx] += s;
                        }
                    }
                }
                if let Some(dx) = dx {
                    send(0, dx);
                }
                if let Some(dw) = dw {
                    send(1, dw.into_iter().map(|v| v as f32).collect());
                }
                if let Some(db) = db {
                    send(2, db.into_iter().map(|v| v as f32).collect());
                }
            }
            Op::ConvTranspose2d { stride, pad, .. } => {
                let x = input_value(0);
                let w = input_value(1);
                let (n, ic, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
                let (oc, kh, kw) = (w.dim(1), w.dim(2), w.dim(3));
                let (out_h, out_w) = (node.value.dim(2), node.value.dim(3));
                let kdim = oc * kh * kw;
                let m = h * wd;
                let mut dx = if needs(0) { Some(vec![0.0f32; x.len()]) } else { None };
                let mut dw = if needs(1) { Some(vec![0.0f64; w.len()]) } else { None };
                let mut db = if needs(2) { Some(vec![0.0f64; oc]) } else { None };
                for im in 0..n {
                    let dout_n = &g[im * oc * out_h * out_w..(im + 1) * oc * out_h * out_w];
                    let dcols = k::unfold(dout_n, oc, out_h, out_w, kh, kw, *stride, *pad, h, wd);
                    if let Some(dx) = dx.as_mut() {
                        let dx_n = k::matmul(w.data(), &dcols, ic, kdim, m);
                        dx[im * ic * m..(im + 1) * ic * m].copy_from_slice(&dx_n);
                    }
                    if let Some(dw) = dw.as_mut() {
                        let x_n = &x.data()[im * ic * m..(im + 1) * ic * m];
                        let dcols_t = k::transpose(&dcols, kdim, m);
                        let prod = k::matmul(x_n, &dcols_t, ic, m, kdim);
                        for (slot, &v) in dw.iter_mut().zip(&prod) {
                            *slot += v as f64;
                        }
                    }
                    if let Some(db) = db.as_mut() {
                        for ocx in 0..oc {
                            let mut s = 0.0f64;
                            for &v in &dout_n[ocx * out_h * out_w..(ocx + 1) * out_h * out_w] {
                                s += v as f64;
                            }
                            db[ocx] += s;
                        }
                    }
                }
                if let Some(dx) = dx {
                    send(0, dx);
                }
                if let Some(dw) = dw {
                    send(1, dw.into_iter().map(|v| v as f32).collect());
                }
                if let Some(db) = db {
                    send(2, db.into_iter().map(|v| v as f32).collect());
                }
            }
        }
    }

    /// Re-executes the recording in `f64` up to `target` (which must hold a
    /// single element), optionally overriding leaf values. This is what the
    /// finite-difference checker perturbs, so the difference quotient sees the
    /// same function the tape computed rather than its `f32` rounding.
    pub(crate) fn replay_f64(
        &self,
        target: NodeId,
        overrides: &HashMap<usize, Vec<f64>>,
    ) -> f64 {
        let mut values: Vec<Option<Vec<f64>>> = (0..=target.0).map(|_| None).collect();
        for idx in 0..=target.0 {
            let node = &self.nodes[idx];
            let data = if let Some(over) = overrides.get(&idx) {
                debug_assert!(matches!(node.op, Op::Leaf));
                over.clone()
            } else if matches!(node.op, Op::Leaf) {
                node.value.data().iter().map(|&v| v as f64).collect()
            } else {
                let ins: Vec<(&[f64], &[usize])> = node
                    .inputs
                    .iter()
                    .map(|id| {
                        (
                            values[id.0].as_ref().expect("topological order").as_slice(),
                            self.nodes[id.0].value.shape(),
                        )
                    })
                    .collect();
                exec::<f64>(&node.op, &ins, node.value.shape())
            };
            values[idx] = Some(data);
        }
        let out = values[target.0].as_ref().unwrap();
        debug_assert_eq!(out.len(), 1);
        out[0]
    }

    pub(crate) fn leaf_len(&self, id: NodeId) -> usize {
        self.nodes[id.0].value.len()
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, contribution: Vec<f32>) {
    match slot {
        Some(existing) => {
            for (dst, src) in existing.iter_mut().zip(contribution) {
                *dst += src;
            }
        }
        None => *slot = Some(contribution),
    }
}

fn infer_shape(op: &Op, ins: &[&[usize]]) -> Result<Vec<usize>, NdError> {
    let name = op_name(op);
    let want_rank = |shape: &[usize], rank: usize| -> Result<(), NdError> {
        if shape.len() != rank {
            return Err(NdError::InvalidShape {
                op: name,
                shape: shape.to_vec(),
                reason: format!("expected rank {rank}"),
            });
        }
        Ok(())
    };
    match op {
        Op::Leaf => unreachable!("leaves are not recorded through infer_shape"),
        Op::StopGradient => Ok(ins[0].to_vec()),
        Op::Matmul => {
            want_rank(ins[0], 2)?;
            want_rank(ins[1], 2)?;
            if ins[0][1] != ins[1][0] {
                return Err(NdError::ShapeMismatch {
                    op: name,
                    lhs: ins[0].to_vec(),
                    rhs: ins[1].to_vec(),
                });
            }
            Ok(vec![ins[0][0], ins[1][1]])
        }
        Op::Add | Op::Sub | Op::Mul => {
            if ins[0] != ins[1] {
                return Err(NdError::ShapeMismatch {
                    op: name,
                    lhs: ins[0].to_vec(),
                    rhs: ins[1].to_vec(),
                });
            }
            Ok(ins[0].to_vec())
        }
        Op::AddScalar(_) | Op::MulScalar(_) | Op::Exp | Op::Log | Op::Abs | Op::Gelu => {
            Ok(ins[0].to_vec())
        }
        Op::AddRowVec => {
            want_rank(ins[0], 2)?;
            want_rank(ins[1], 1)?;
            if ins[0][1] != ins[1][0] {
                return Err(NdError::ShapeMismatch {
                    op: name,
                    lhs: ins[0].to_vec(),
                    rhs: ins[1].to_vec(),
                });
            }
            Ok(ins[0].to_vec())
        }
        Op::RowLogSoftmax | Op::RowL2Normalize => {
            want_rank(ins[0], 2)?;
            Ok(ins[0].to_vec())
        }
        Op::Sum | Op::Mean => Ok(vec![]),
        Op::SumAxis(axis) | Op::MeanAxis(axis) => {
            if *axis >= ins[0].len() {
                return Err(NdError::InvalidShape {
                    op: name,
                    shape: ins[0].to_vec(),
                    reason: format!("axis {axis} out of range"),
                });
            }
            let mut shape = ins[0].to_vec();
            shape.remove(*axis);
            Ok(shape)
        }
        Op::Reshape(target) => {
            let from: usize = ins[0].iter().product();
            let to: usize = target.iter().product();
            if from != to || target.iter().any(|&d| d == 0) {
                return Err(NdError::ShapeMismatch {
                    op: name,
                    lhs: ins[0].to_vec(),
                    rhs: target.clone(),
                });
            }
            Ok(target.clone())
        }
        Op::Transpose2d => {
            want_rank(ins[0], 2)?;
            Ok(vec![ins[0][1], ins[0][0]])
        }
        Op::Conv2d { stride, pad } => {
            want_rank(ins[0], 4)?;
            want_rank(ins[1], 4)?;
            want_rank(ins[2], 1)?;
            let (x, w, b) = (ins[0], ins[1], ins[2]);
            if w[1] != x[1] || b[0] != w[0] {
                return Err(NdError::ShapeMismatch {
                    op: name,
                    lhs: x.to_vec(),
                    rhs: w.to_vec(),
                });
            }
            if *stride == 0 {
                return Err(NdError::Invalid {
                    op: name,
                    msg: "stride must be >= 1".into(),
                });
            }
            let span_h = (x[2] + 2 * pad).checked_sub(w[2]);
            let span_w = (x[3] + 2 * pad).checked_sub(w[3]);
            match (span_h, span_w) {
                (Some(sh), Some(sw)) => Ok(vec![x[0], w[0], sh / stride + 1, sw / stride + 1]),
                _ => Err(NdError::Invalid {
                    op: name,
                    msg: format!(
                        "kernel {}x{} larger than padded input {}x{}",
                        w[2],
                        w[3],
                        x[2] + 2 * pad,
                        x[3] + 2 * pad
                    ),
                }),
            }
        }
        Op::ConvTranspose2d {
            stride,
            pad,
            out_pad,
        } => {
            want_rank(ins[0], 4)?;
            want_rank(ins[1], 4)?;
            want_rank(ins[2], 1)?;
            let (x, w, b) = (ins[0], ins[1], ins[2]);
            if w[0] != x[1] || b[0] != w[1] {
                return Err(NdError::ShapeMismatch {
                    op: name,
                    lhs: x.to_vec(),
                    rhs: w.to_vec(),
                });
            }
            if *stride == 0 || *out_pad >= *stride {
                return Err(NdError::Invalid {
                    op: name,
                    msg: "need stride >= 1 and out_pad < stride".into(),
                });
            }
            let oh = ((x[2] - 1) * stride + w[2] + out_pad).checked_sub(2 * pad);
            let ow = ((x[3] - 1) * stride + w[3] + out_pad).checked_sub(2 * pad);
            match (oh, ow) {
                (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Ok(vec![x[0], w[1], oh, ow]),
                _ => Err(NdError::Invalid {
                    op: name,
                    msg: "padding consumes the whole output".into(),
                }),
            }
        }
    }
}

/// Executes one op on already-validated inputs. Shared by the `f32` forward
/// pass and the `f64` replay.
fn exec<S: Scalar>(op: &Op, ins: &[(&[S], &[usize])], out_shape: &[usize]) -> Vec<S> {
    match op {
        Op::Leaf => unreachable!("leaves hold values directly"),
        Op::StopGradient => ins[0].0.to_vec(),
        Op::Matmul => {
            let (m, kk) = (ins[0].1[0], ins[0].1[1]);
            let n = ins[1].1[1];
            k::matmul(ins[0].0, ins[1].0, m, kk, n)
        }
        Op::Add => k::ew_add(ins[0].0, ins[1].0),
        Op::Sub => k::ew_sub(ins[0].0, ins[1].0),
        Op::Mul => k::ew_mul(ins[0].0, ins[1].0),
        Op::AddScalar(c) => k::add_scalar(ins[0].0, *c),
        Op::MulScalar(c) => k::mul_scalar(ins[0].0, *c),
        Op::AddRowVec => k::add_row_vec(ins[0].0, ins[1].0, ins[0].1[0], ins[0].1[1]),
        Op::Exp => k::ew_exp(ins[0].0),
        Op::Log => k::ew_ln(ins[0].0),
        Op::Abs => k::ew_abs(ins[0].0),
        Op::Gelu => k::ew_gelu(ins[0].0),
        Op::RowLogSoftmax => k::row_log_softmax(ins[0].0, ins[0].1[0], ins[0].1[1]),
        Op::RowL2Normalize => k::row_l2_normalize(ins[0].0, ins[0].1[0], ins[0].1[1]),
        Op::Sum => vec![k::sum_all(ins[0].0)],
        Op::Mean => vec![k::mean_all(ins[0].0)],
        Op::SumAxis(axis) => k::reduce_axis(ins[0].0, ins[0].1, *axis, false),
        Op::MeanAxis(axis) => k::reduce_axis(ins[0].0, ins[0].1, *axis, true),
        Op::Reshape(_) => ins[0].0.to_vec(),
        Op::Transpose2d => k::transpose(ins[0].0, ins[0].1[0], ins[0].1[1]),
        Op::Conv2d { stride, pad } => {
            let (xd, xs) = ins[0];
            let (wd, ws) = ins[1];
            let bd = ins[2].0;
            let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
            let (oh, ow) = (out_shape[2], out_shape[3]);
            let kdim = c * kh * kw;
            let m = oh * ow;
            let mut out = vec![S::ZERO; n * oc * m];
            for im in 0..n {
                let x_n = &xd[im * c * h * w..(im + 1) * c * h * w];
                let cols = k::unfold(x_n, c, h, w, kh, kw, *stride, *pad, oh, ow);
                let prod = k::matmul(wd, &cols, oc, kdim, m);
                let dst = &mut out[im * oc * m..(im + 1) * oc * m];
                for ocx in 0..oc {
                    let bias = bd[ocx];
                    for (o, &p) in dst[ocx * m..(ocx + 1) * m]
                        .iter_mut()
                        .zip(&prod[ocx * m..(ocx + 1) * m])
                    {
                        *o = p + bias;
                    }
                }
            }
            out
        }
        Op::ConvTranspose2d { stride, pad, .. } => {
            let (xd, xs) = ins[0];
            let (wd, ws) = ins[1];
            let bd = ins[2].0;
            let (n, ic, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let (oc, kh, kw) = (ws[1], ws[2], ws[3]);
            let (out_h, out_w) = (out_shape[2], out_shape[3]);
            let kdim = oc * kh * kw;
            let m = h * w;
            let wt = k::transpose(wd, ic, kdim);
            let mut out = vec![S::ZERO; n * oc * out_h * out_w];
            for im in 0..n {
                let x_n = &xd[im * ic * m..(im + 1) * ic * m];
                let cols = k::matmul(&wt, x_n, kdim, ic, m);
                let dst = &mut out[im * oc * out_h * out_w..(im + 1) * oc * out_h * out_w];
                k::fold_add(&cols, dst, oc, out_h, out_w, kh, kw, *stride, *pad, h, w);
                for ocx in 0..oc {
                    let bias = bd[ocx];
                    for o in dst[ocx * out_h * out_w..(ocx + 1) * out_h * out_w].iter_mut() {
                        *o = *o + bias;
                    }
                }
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], data: &[f32]) -> Array {
        Array::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_forward_and_backward() {
        let mut t = Tape::new();
        let a = t.leaf(arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad());
        let b = t.leaf(arr(&[2, 2], &[5.0, 6.0, 7.0, 8.0]).with_grad());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
        let s = t.sum(c).unwrap();
        let g = t.backward(s).unwrap();
        // d sum(AB) / dA = ones @ B^T
        assert_eq!(g.get(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(g.get(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(Array::zeros(&[2, 3]));
        let b = t.leaf(Array::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let a = t.leaf(Array::zeros(&[2, 2]).with_grad());
        assert!(matches!(
            t.backward(a),
            Err(NdError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn log_of_negative_reports_non_finite() {
        let mut t = Tape::new();
        let a = t.leaf(arr(&[2], &[1.0, -1.0]));
        assert!(matches!(t.log(a), Err(NdError::NonFinite { op: "log" })));
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut t = Tape::new();
        let a = t.leaf(arr(&[2], &[2.0, 3.0]).with_grad());
        let sg = t.stop_gradient(a);
        let prod = t.mul(a, sg).unwrap(); // d/da (a * const(a)) = const(a)
        let s = t.sum(prod).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let mut t = Tape::new();
        let used = t.leaf(arr(&[2], &[1.0, 2.0]).with_grad());
        let unused = t.leaf(arr(&[3], &[1.0, 2.0, 3.0]).with_grad());
        let s = t.sum(used).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_twice_is_bit_identical() {
        let mut t = Tape::new();
        let a = t.leaf(arr(&[2, 3], &[0.3, -1.2, 0.7, 0.01, 2.0, -0.5]).with_grad());
        let sm = t.row_log_softmax(a).unwrap();
        let e = t.exp(sm).unwrap();
        let l = t.mean(e).unwrap();
        let g1 = t.backward(l).unwrap();
        let g2 = t.backward(l).unwrap();
        assert_eq!(g1.get(a).unwrap().data(), g2.get(a).unwrap().data());
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        // 1 image, 1 channel, 4x4, one 3x3 kernel, stride 1, pad 1.
        let x: Vec<f32> = (0..16).map(|v| v as f32 * 0.1).collect();
        let w = vec![0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0]; // laplacian
        let mut t = Tape::new();
        let xn = t.leaf(arr(&[1, 1, 4, 4], &x));
        let wn = t.leaf(arr(&[1, 1, 3, 3], &w));
        let bn = t.leaf(arr(&[1], &[0.5]));
        let y = t.conv2d(xn, wn, bn, 1, 1).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 1, 4, 4]);
        // interior pixel (1,1): x[0,1]+x[1,0]+x[1,2]+x[2,1]-4*x[1,1] + 0.5
        let expect = 0.1 + 0.4 + 0.6 + 0.9 - 4.0 * 0.5 + 0.5;
        let got = t.value(y).data()[5];
        assert!((got - expect).abs() < 1e-5, "{got} vs {expect}");
    }

    #[test]
    fn conv_transpose_inverts_shape() {
        let mut t = Tape::new();
        let x = t.leaf(Array::zeros(&[2, 4, 8, 8]));
        let w = t.leaf(Array::full(&[4, 3, 3, 3], 0.01));
        let b = t.leaf(Array::zeros(&[3]));
        let y = t.conv_transpose2d(x, w, b, 2, 1, 1).unwrap();
        assert_eq!(t.value(y).shape(), &[2, 3, 16, 16]);
    }
}
