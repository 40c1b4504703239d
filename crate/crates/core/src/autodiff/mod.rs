//! Tape-based reverse-mode differentiation over small dense tensors.
//!
//! A [`Graph`] records every operation as a node. Leaves are either constants
//! or gradient-requiring inputs (parameters). [`Graph::backward`] walks the tape
//! in reverse from a scalar loss and returns gradients for every
//! gradient-requiring leaf plus any explicitly marked interior node reachable
//! from that loss.

mod gradcheck;
pub(crate) mod kernels;

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use gradcheck::{grad_check, norm_rel_err, rel_err, GradCheckReport};
use kernels::ConvGeom;

/// Stabiliser inside the logarithm of the cross-entropy.
pub const CE_EPS: f32 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    Relu(NodeId),
    Sigmoid(NodeId),
    /// Softmax over the leading axis of a `[C,H,W]` tensor.
    Softmax(NodeId),
    MaxPool2 {
        input: NodeId,
        argmax: Arc<[u32]>,
    },
    Upsample2(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Mse(NodeId, NodeId),
    CrossEntropy {
        prob: NodeId,
        target: NodeId,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, weight, bias, ..
            } => {
                let mut v = vec![input, weight];
                v.extend(bias);
                v
            }
            Op::Add(a, b) | Op::Mul(a, b) | Op::Mse(a, b) => vec![a, b],
            Op::CrossEntropy { prob, target } => vec![prob, target],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::Upsample2(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![a],
            Op::MaxPool2 { input, .. } => vec![input],
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    /// Double-precision value of scalar reductions, carried alongside the
    /// `f32` storage so loss differences are not quantised by the final cast.
    wide: Option<f64>,
}

/// Gradients keyed by node. Absent keys mean "not reachable from the loss".
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    grads: BTreeMap<NodeId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad: false,
            wide: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_scalar(&mut self, wide: f64, op: Op) -> NodeId {
        let id = self.push(Tensor::scalar(wide as f32), op);
        self.nodes[id.0].wide = Some(wide);
        id
    }

    fn wide_of(&self, id: NodeId) -> Option<f64> {
        let n = &self.nodes[id.0];
        match n.wide {
            Some(v) => Some(v),
            None if n.value.is_scalar() => Some(n.value.item() as f64),
            None => None,
        }
    }

    /// Adds an input tensor. Only leaves created with `requires_grad` receive
    /// gradient entries (besides marked nodes).
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Like [`Graph::leaf`] without copying the payload.
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            wide: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> f32 {
        self.value(id).item()
    }

    /// Scalar value in double precision where the node tracks one.
    pub fn scalar_f64(&self, id: NodeId) -> f64 {
        self.wide_of(id).unwrap_or_else(|| self.value(id).item() as f64)
    }

    /// Which side of every non-differentiable point the graph sits on: the
    /// sign of each ReLU input and the argmax of each pooling window.
    pub fn kink_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => out.extend(self.value(*a).data().iter().map(|&x| (x > 0.0) as u32)),
                Op::MaxPool2 { argmax, .. } => out.extend(argmax.iter()),
                _ => {}
            }
        }
        out
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        const OP: &str = "conv2d";
        let (c_in, h, w) = self.value(input).chw(OP)?;
        let ws = self.value(weight).shape().to_vec();
        if ws.len() != 4 {
            return Err(Error::dim(OP, "weight.rank", 4, ws.len()));
        }
        let (c_out, k) = (ws[0], ws[2]);
        if ws[1] != c_in {
            return Err(Error::dim(OP, "weight.in_channels", c_in, ws[1]));
        }
        if ws[3] != k {
            return Err(Error::dim(OP, "weight.kernel_width", k, ws[3]));
        }
        if k % 2 == 0 {
            return Err(Error::contract(format!("{OP}: kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::contract(format!("{OP}: stride must be >= 1")));
        }
        if let Some(b) = bias {
            self.value(b).expect_shape(OP, &[c_out]).map_err(|_| {
                Error::dim(OP, "bias.channels", c_out, self.value(b).numel())
            })?;
        }
        let out_dim = |n: usize, axis: &str| -> Result<usize> {
            let span = (n + 2 * pad)
                .checked_sub(k)
                .ok_or_else(|| Error::dim(OP, axis, k, n + 2 * pad))?;
            if span % stride != 0 {
                return Err(Error::dim(OP, axis, n + stride - span % stride, n));
            }
            Ok(span / stride + 1)
        };
        let h_out = out_dim(h, "height")?;
        let w_out = out_dim(w, "width")?;
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out,
            w_out,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(&[c_out, h_out, w_out], out)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        if let (true, Some(wa), Some(wb)) = (t.is_scalar(), self.wide_of(a), self.wide_of(b)) {
            return Ok(self.push_scalar(wa + wb, Op::Add(a, b)));
        }
        Ok(self.push(t, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f32) -> NodeId {
        if self.value(a).is_scalar() {
            if let Some(wa) = self.wide_of(a) {
                return self.push_scalar(wa * factor as f64, Op::Scale(a, factor));
            }
        }
        let t = self.value(a).map(|x| x * factor);
        self.push(t, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(|x| if x < 0.0 { 0.0 } else { x });
        self.push(t, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    /// Per-pixel softmax over the channel axis of a `[C,H,W]` tensor.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let src = self.value(a);
        let (c, h, w) = src.chw("softmax")?;
        let hw = h * w;
        let x = src.data();
        let mut out = vec![0.0f32; x.len()];
        for px in 0..hw {
            let mut m = f32::NEG_INFINITY;
            for k in 0..c {
                m = m.max(x[k * hw + px]);
            }
            let mut z = 0.0f32;
            for k in 0..c {
                let e = (x[k * hw + px] - m).exp();
                out[k * hw + px] = e;
                z += e;
            }
            for k in 0..c {
                out[k * hw + px] /= z;
            }
        }
        let t = Tensor::new(&[c, h, w], out)?;
        Ok(self.push(t, Op::Softmax(a)))
    }

    /// 2×2 max pooling with stride 2; spatial dims must be even.
    pub fn maxpool2(&mut self, a: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(a).chw("maxpool2")?;
        if h % 2 != 0 {
            return Err(Error::dim("maxpool2", "height", h + 1, h));
        }
        if w % 2 != 0 {
            return Err(Error::dim("maxpool2", "width", w + 1, w));
        }
        let (out, argmax) = kernels::maxpool2_forward(c, h, w, self.value(a).data());
        let t = Tensor::new(&[c, h / 2, w / 2], out)?;
        Ok(self.push(
            t,
            Op::MaxPool2 {
                input: a,
                argmax: argmax.into(),
            },
        ))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, a: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(a).chw("upsample2")?;
        let out = kernels::upsample2_forward(c, h, w, self.value(a).data());
        let t = Tensor::new(&[c, 2 * h, 2 * w], out)?;
        Ok(self.push(t, Op::Upsample2(a)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        self.push_scalar(s, Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s = v.sum() / v.numel() as f64;
        self.push_scalar(s, Op::Mean(a))
    }

    /// Mean squared error between two same-shaped nodes.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let p = self.value(pred);
        let t = self.value(target);
        t.expect_shape("mse", p.shape())?;
        let s: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum();
        let v = s / p.numel() as f64;
        Ok(self.push_scalar(v, Op::Mse(pred, target)))
    }

    /// Pixel-mean of `-Σ_c y_c ln(p_c + ε)` over `[C,H,W]` probability maps.
    pub fn cross_entropy(&mut self, prob: NodeId, target: NodeId) -> Result<NodeId> {
        let p = self.value(prob);
        let y = self.value(target);
        let (_, h, w) = p.chw("cross_entropy")?;
        y.expect_shape("cross_entropy", p.shape())?;
        let s: f64 = p
            .data()
            .iter()
            .zip(y.data())
            .filter(|(_, &yv)| yv != 0.0)
            .map(|(&pv, &yv)| -(yv as f64) * ((pv + CE_EPS) as f64).ln())
            .sum();
        let v = s / (h * w) as f64;
        Ok(self.push_scalar(v, Op::CrossEntropy { prob, target }))
    }

    /// Reverse pass from the scalar `loss`.
    ///
    /// The result holds an entry for every `requires_grad` leaf and every node
    /// in `marked` that the loss depends on; nothing else.
    pub fn backward(&self, loss: NodeId, marked: &[NodeId]) -> Result<GradientMap> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::contract(format!("loss node {} does not exist", loss.0)));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let upto = loss.0 + 1;
        let mut is_target = vec![false; upto];
        for m in marked {
            if m.0 < upto {
                is_target[m.0] = true;
            }
        }
        for (i, node) in self.nodes[..upto].iter().enumerate() {
            if node.requires_grad {
                is_target[i] = true;
            }
        }
        // wants[i]: some gradient target lies at or below node i.
        let mut wants = vec![false; upto];
        for i in 0..upto {
            wants[i] = is_target[i] || self.nodes[i].op.inputs().iter().any(|j| wants[j.0]);
        }

        let mut grads: Vec<Option<Vec<f32>>> = vec![None; upto];
        let mut out = GradientMap::default();
        if !wants[loss.0] {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..upto).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &wants, &mut grads)?;
            if is_target[i] {
                let shape = self.nodes[i].value.shape();
                out.grads.insert(NodeId(i), Tensor::new(shape, g)?);
            }
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &[f32], wants: &[bool], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let want = (wants[input.0], wants[weight.0], bias.is_some_and(|b| wants[b.0]));
                if want.0 || want.1 || want.2 {
                    let cg = kernels::conv2d_backward(
                        geom,
                        self.value(*input).data(),
                        self.value(*weight).data(),
                        g,
                        want,
                    );
                    if let Some(dx) = cg.input {
                        accumulate(grads, *input, dx);
                    }
                    if let Some(dw) = cg.weight {
                        accumulate(grads, *weight, dw);
                    }
                    if let (Some(db), Some(b)) = (cg.bias, bias) {
                        accumulate(grads, *b, db);
                    }
                }
            }
            Op::Add(a, b) => {
                if wants[a.0] {
                    accumulate(grads, *a, g.to_vec());
                }
                if wants[b.0] {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                if wants[a.0] {
                    let bv = self.value(*b).data();
                    accumulate(grads, *a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                }
                if wants[b.0] {
                    let av = self.value(*a).data();
                    accumulate(grads, *b, g.iter().zip(av).map(|(g, a)| g * a).collect());
                }
            }
            Op::Scale(a, f) => {
                if wants[a.0] {
                    accumulate(grads, *a, g.iter().map(|g| g * f).collect());
                }
            }
            Op::Relu(a) => {
                if wants[a.0] {
                    let x = self.value(*a).data();
                    let d = g
                        .iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(grads, *a, d);
                }
            }
            Op::Sigmoid(a) => {
                if wants[a.0] {
                    let d = g.iter().zip(y).map(|(&g, &s)| g * s * (1.0 - s)).collect();
                    accumulate(grads, *a, d);
                }
            }
            Op::Softmax(a) => {
                if wants[a.0] {
                    let (c, h, w) = node.value.chw("softmax")?;
                    let hw = h * w;
                    let mut d = vec![0.0f32; y.len()];
                    for px in 0..hw {
                        let mut dot = 0.0f32;
                        for k in 0..c {
                            dot += g[k * hw + px] * y[k * hw + px];
                        }
                        for k in 0..c {
                            d[k * hw + px] = y[k * hw + px] * (g[k * hw + px] - dot);
                        }
                    }
                    accumulate(grads, *a, d);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if wants[input.0] {
                    let mut d = vec![0.0f32; self.value(*input).numel()];
                    for (&gi, &src) in g.iter().zip(argmax.iter()) {
                        d[src as usize] += gi;
                    }
                    accumulate(grads, *input, d);
                }
            }
            Op::Upsample2(a) => {
                if wants[a.0] {
                    let (c, h, w) = self.value(*a).chw("upsample2")?;
                    accumulate(grads, *a, kernels::upsample2_backward(c, h, w, g));
                }
            }
            Op::Sum(a) => {
                if wants[a.0] {
                    accumulate(grads, *a, vec![g[0]; self.value(*a).numel()]);
                }
            }
            Op::Mean(a) => {
                if wants[a.0] {
                    let n = self.value(*a).numel();
                    accumulate(grads, *a, vec![g[0] / n as f32; n]);
                }
            }
            Op::Mse(p, t) => {
                let pv = self.value(*p).data();
                let tv = self.value(*t).data();
                let scale = 2.0 * g[0] / pv.len() as f32;
                if wants[p.0] {
                    accumulate(grads, *p, pv.iter().zip(tv).map(|(a, b)| scale * (a - b)).collect());
                }
                if wants[t.0] {
                    accumulate(grads, *t, pv.iter().zip(tv).map(|(a, b)| scale * (b - a)).collect());
                }
            }
            Op::CrossEntropy { prob, target } => {
                let pv = self.value(*prob);
                let yv = self.value(*target).data();
                let (_, h, w) = pv.chw("cross_entropy")?;
                let scale = g[0] / (h * w) as f32;
                if wants[prob.0] {
                    let d = pv
                        .data()
                        .iter()
                        .zip(yv)
                        .map(|(&p, &y)| -scale * y / (p + CE_EPS))
                        .collect();
                    accumulate(grads, *prob, d);
                }
                if wants[target.0] {
                    let d = pv.data().iter().map(|&p| -scale * (p + CE_EPS).ln()).collect();
                    accumulate(grads, *target, d);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], id: NodeId, delta: Vec<f32>) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(&delta) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests;
