//! Reverse-mode automatic differentiation over a define-by-run tape.
//!
//! Nodes are appended in construction order, values are computed eagerly,
//! and `backward` walks the tape in reverse. The op set is exactly what the
//! generator/discriminator pair and the latent search need; there is no
//! general broadcasting.

use crate::error::{Error, Result};
use crate::nncore::ops::{self, ConvGeom};
use crate::nncore::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul,
    AddRowBias,
    AddChanBias,
    Conv2d { stride: usize, pad: usize },
    ConvT2d { stride: usize, pad: usize },
    BatchNormTrain { eps: f64 },
    BatchNormEval { eps: f64, mean: Vec<f64>, var: Vec<f64> },
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
    Sigmoid,
    Ln,
    Abs,
    Clamp { lo: f64, hi: f64 },
    Scale { c: f64 },
    AddConst,
    Add,
    Sub,
    Reshape,
    ReduceSum,
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Per-node gradients produced by `Graph::backward`.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of a node, or zeros if the node did not influence the loss.
    pub fn take_or_zeros(&mut self, id: NodeId, shape: &[usize]) -> Tensor {
        self.grads[id.0].take().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// a [m,k] × b [k,n] -> [m,n]
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.shape_err("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        ops::matmul_nn(
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
            out.data_mut(),
        );
        Ok(self.push(Op::MatMul, vec![a, b], out))
    }

    /// x [n,f] + b [f] broadcast over rows.
    pub fn add_row_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.shape_of(x), self.shape_of(b));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(self.shape_err("add_row_bias", x, b));
        }
        let f = sx[1];
        let mut out = self.value(x).clone();
        let bv = self.value(b).data().to_vec();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv[i % f];
        }
        Ok(self.push(Op::AddRowBias, vec![x, b], out))
    }

    /// x [n,c,h,w] + b [c] broadcast over (n,h,w).
    pub fn add_chan_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.shape_of(x), self.shape_of(b));
        if sx.len() != 4 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(self.shape_err("add_chan_bias", x, b));
        }
        let (c, hw) = (sx[1], sx[2] * sx[3]);
        let mut out = self.value(x).clone();
        let bv = self.value(b).data().to_vec();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv[(i / hw) % c];
        }
        Ok(self.push(Op::AddChanBias, vec![x, b], out))
    }

    /// x [n,ci,h,w] ⊛ w [co,ci,kh,kw], zero padding.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (sx, sw) = (self.shape_of(x), self.shape_of(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(self.shape_err("conv2d", x, w));
        }
        if sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(self.shape_err("conv2d", x, w));
        }
        let (n, co) = (sx[0], sw[0]);
        let g = ConvGeom::new(sx[1], sx[2], sx[3], sw[2], sw[3], stride, pad);
        let mut out = Tensor::zeros(&[n, co, g.oh, g.ow]);
        ops::conv2d_fwd(
            self.value(x).data(),
            self.value(w).data(),
            n,
            &g,
            co,
            out.data_mut(),
        );
        Ok(self.push(Op::Conv2d { stride, pad }, vec![x, w], out))
    }

    /// x [n,ci,hi,wi] transposed-convolved with w [ci,co,kh,kw]; output
    /// spatial size (hi-1)*stride - 2*pad + kh. Exact adjoint of `conv2d`.
    pub fn conv2d_transpose(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (sx, sw) = (self.shape_of(x), self.shape_of(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] {
            return Err(self.shape_err("conv2d_transpose", x, w));
        }
        let (n, ci, co) = (sx[0], sx[1], sw[1]);
        let oh = (sx[2] - 1) * stride + sw[2];
        let ow = (sx[3] - 1) * stride + sw[3];
        if oh < 2 * pad || ow < 2 * pad {
            return Err(self.shape_err("conv2d_transpose", x, w));
        }
        let (oh, ow) = (oh - 2 * pad, ow - 2 * pad);
        let g = ConvGeom::new(co, oh, ow, sw[2], sw[3], stride, pad);
        if g.oh != sx[2] || g.ow != sx[3] {
            return Err(self.shape_err("conv2d_transpose", x, w));
        }
        let mut out = Tensor::zeros(&[n, co, oh, ow]);
        ops::convt2d_fwd(
            self.value(x).data(),
            self.value(w).data(),
            n,
            &g,
            ci,
            out.data_mut(),
        );
        Ok(self.push(Op::ConvT2d { stride, pad }, vec![x, w], out))
    }

    /// Batch normalization over (N,H,W) per channel with batch statistics.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let sx = self.shape_of(x);
        if sx.len() != 4 || self.shape_of(gamma) != [sx[1]] || self.shape_of(beta) != [sx[1]] {
            return Err(self.shape_err("batch_norm", x, gamma));
        }
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let (mean, var) = ops::channel_stats(self.value(x).data(), n, c, hw);
        let out = self.bn_normalize(x, gamma, beta, &mean, &var, eps);
        Ok(self.push(Op::BatchNormTrain { eps }, vec![x, gamma, beta], out))
    }

    /// Batch normalization with frozen (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<NodeId> {
        let sx = self.shape_of(x);
        if sx.len() != 4
            || self.shape_of(gamma) != [sx[1]]
            || self.shape_of(beta) != [sx[1]]
            || mean.len() != sx[1]
            || var.len() != sx[1]
        {
            return Err(self.shape_err("batch_norm", x, gamma));
        }
        let out = self.bn_normalize(x, gamma, beta, mean, var, eps);
        Ok(self.push(
            Op::BatchNormEval {
                eps,
                mean: mean.to_vec(),
                var: var.to_vec(),
            },
            vec![x, gamma, beta],
            out,
        ))
    }

    fn bn_normalize(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Tensor {
        let sx = self.shape_of(x).to_vec();
        let (c, hw) = (sx[1], sx[2] * sx[3]);
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = self.value(x).clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / hw) % c;
            let inv = 1.0 / (var[ch] + eps).sqrt();
            *o = gv[ch] * (*o - mean[ch]) * inv + bv[ch];
        }
        out
    }

    /// Batch mean and biased variance that a `batch_norm_train` node used;
    /// the trainer reads these to update running statistics.
    pub fn batch_stats(&self, bn: NodeId) -> Option<(Vec<f64>, Vec<f64>)> {
        match self.nodes[bn.0].op {
            Op::BatchNormTrain { .. } => {
                let x = self.nodes[bn.0].inputs[0];
                let sx = self.shape_of(x);
                let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                Some(ops::channel_stats(self.value(x).data(), n, c, hw))
            }
            _ => None,
        }
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu, vec![x], out)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(Op::LeakyRelu { slope }, vec![x], out)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(f64::tanh);
        self.push(Op::Tanh, vec![x], out)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(Op::Sigmoid, vec![x], out)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(f64::ln);
        self.push(Op::Ln, vec![x], out)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(f64::abs);
        self.push(Op::Abs, vec![x], out)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(Op::Clamp { lo, hi }, vec![x], out)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.value(x).map(|v| c * v);
        self.push(Op::Scale { c }, vec![x], out)
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.value(x).map(|v| v + c);
        self.push(Op::AddConst, vec![x], out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(self.shape_err("add", a, b));
        }
        let mut out = self.value(a).clone();
        let bd = self.value(b).data().to_vec();
        for (o, bv) in out.data_mut().iter_mut().zip(bd) {
            *o += bv;
        }
        Ok(self.push(Op::Add, vec![a, b], out))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(self.shape_err("sub", a, b));
        }
        let mut out = self.value(a).clone();
        let bd = self.value(b).data().to_vec();
        for (o, bv) in out.data_mut().iter_mut().zip(bd) {
            *o -= bv;
        }
        Ok(self.push(Op::Sub, vec![a, b], out))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).reshaped(shape)?;
        Ok(self.push(Op::Reshape, vec![x], out))
    }

    /// [n, ...] -> [n, prod(rest)]
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape_of(x).to_vec();
        if s.is_empty() {
            return Err(Error::InvalidShape("cannot flatten a scalar".into()));
        }
        let rest: usize = s[1..].iter().product();
        self.reshape(x, &[s[0], rest])
    }

    /// Sum of all entries, as a rank-0 scalar.
    pub fn reduce_sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Op::ReduceSum, vec![x], Tensor::scalar(s))
    }

    /// matmul + row bias.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let m = self.matmul(x, w)?;
        self.add_row_bias(m, b)
    }

    /// Mean of all entries, as a rank-0 scalar.
    pub fn reduce_mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel() as f64;
        let s = self.reduce_sum(x);
        self.scale(s, 1.0 / n)
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn shape_err(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.shape_of(a).to_vec(),
            rhs: self.shape_of(b).to_vec(),
        }
    }

    /// Reverse accumulation from a scalar loss node. Returns a gradient for
    /// every node on a path from a `requires_grad` leaf to the loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_val = self.value(loss);
        if !loss_val.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: loss_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(loss_val.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_inputs(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate_inputs(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let add_to = |id: NodeId, t: Tensor, grads: &mut [Option<Tensor>]| {
            debug_assert_eq!(self.nodes[id.0].value.shape(), t.shape());
            match &mut grads[id.0] {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(t),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (sa, sb) = (self.shape_of(a), self.shape_of(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(a) {
                    let mut da = Tensor::zeros(sa);
                    ops::matmul_nt(g.data(), self.value(b).data(), m, n, k, da.data_mut());
                    add_to(a, da, grads);
                }
                if needs(b) {
                    let mut db = Tensor::zeros(sb);
                    ops::matmul_tn(self.value(a).data(), g.data(), k, m, n, db.data_mut());
                    add_to(b, db, grads);
                }
            }
            Op::AddRowBias => {
                let (x, b) = (node.inputs[0], node.inputs[1]);
                if needs(x) {
                    add_to(x, g.clone(), grads);
                }
                if needs(b) {
                    let f = self.shape_of(b)[0];
                    let mut db = Tensor::zeros(&[f]);
                    for (i, &gv) in g.data().iter().enumerate() {
                        db.data_mut()[i % f] += gv;
                    }
                    add_to(b, db, grads);
                }
            }
            Op::AddChanBias => {
                let (x, b) = (node.inputs[0], node.inputs[1]);
                if needs(x) {
                    add_to(x, g.clone(), grads);
                }
                if needs(b) {
                    let sx = self.shape_of(x);
                    let (c, hw) = (sx[1], sx[2] * sx[3]);
                    let mut db = Tensor::zeros(&[c]);
                    for (i, &gv) in g.data().iter().enumerate() {
                        db.data_mut()[(i / hw) % c] += gv;
                    }
                    add_to(b, db, grads);
                }
            }
            Op::Conv2d { stride, pad } => {
                let (x, w) = (node.inputs[0], node.inputs[1]);
                let (sx, sw) = (self.shape_of(x), self.shape_of(w));
                let geom = ConvGeom::new(sx[1], sx[2], sx[3], sw[2], sw[3], *stride, *pad);
                let mut dx = Tensor::zeros(sx);
                let mut dw = Tensor::zeros(sw);
                ops::conv2d_bwd(
                    self.value(x).data(),
                    self.value(w).data(),
                    g.data(),
                    sx[0],
                    &geom,
                    sw[0],
                    dx.data_mut(),
                    dw.data_mut(),
                );
                if needs(x) {
                    add_to(x, dx, grads);
                }
                if needs(w) {
                    add_to(w, dw, grads);
                }
            }
            Op::ConvT2d { stride, pad } => {
                let (x, w) = (node.inputs[0], node.inputs[1]);
                let (sx, sw) = (self.shape_of(x), self.shape_of(w));
                let so = node.value.shape();
                let geom = ConvGeom::new(so[1], so[2], so[3], sw[2], sw[3], *stride, *pad);
                let mut dx = Tensor::zeros(sx);
                let mut dw = Tensor::zeros(sw);
                ops::convt2d_bwd(
                    self.value(x).data(),
                    self.value(w).data(),
                    g.data(),
                    sx[0],
                    &geom,
                    sx[1],
                    dx.data_mut(),
                    dw.data_mut(),
                );
                if needs(x) {
                    add_to(x, dx, grads);
                }
                if needs(w) {
                    add_to(w, dw, grads);
                }
            }
            Op::BatchNormTrain { eps } => {
                let (x, gamma, beta) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let sx = self.shape_of(x);
                let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                let cnt = (n * hw) as f64;
                let xv = self.value(x).data();
                let gv = self.value(gamma).data();
                let (mean, var) = ops::channel_stats(xv, n, c, hw);
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

                // per-channel sums of dy and dy*xhat
                let mut sum_dy = vec![0.0; c];
                let mut sum_dyx = vec![0.0; c];
                for (i, &gy) in g.data().iter().enumerate() {
                    let ch = (i / hw) % c;
                    sum_dy[ch] += gy;
                    sum_dyx[ch] += gy * (xv[i] - mean[ch]) * inv[ch];
                }
                if needs(x) {
                    let mut dx = Tensor::zeros(sx);
                    for (i, d) in dx.data_mut().iter_mut().enumerate() {
                        let ch = (i / hw) % c;
                        let xhat = (xv[i] - mean[ch]) * inv[ch];
                        *d = gv[ch]
                            * inv[ch]
                            * (g.data()[i] - sum_dy[ch] / cnt - xhat * sum_dyx[ch] / cnt);
                    }
                    add_to(x, dx, grads);
                }
                if needs(gamma) {
                    add_to(gamma, Tensor::new(vec![c], sum_dyx).unwrap(), grads);
                }
                if needs(beta) {
                    add_to(beta, Tensor::new(vec![c], sum_dy).unwrap(), grads);
                }
            }
            Op::BatchNormEval { eps, mean, var } => {
                let (x, gamma, beta) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let sx = self.shape_of(x);
                let (c, hw) = (sx[1], sx[2] * sx[3]);
                let xv = self.value(x).data();
                let gv = self.value(gamma).data();
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                if needs(x) {
                    let mut dx = Tensor::zeros(sx);
                    for (i, d) in dx.data_mut().iter_mut().enumerate() {
                        let ch = (i / hw) % c;
                        *d = g.data()[i] * gv[ch] * inv[ch];
                    }
                    add_to(x, dx, grads);
                }
                if needs(gamma) {
                    let mut dg = vec![0.0; c];
                    for (i, &gy) in g.data().iter().enumerate() {
                        let ch = (i / hw) % c;
                        dg[ch] += gy * (xv[i] - mean[ch]) * inv[ch];
                    }
                    add_to(gamma, Tensor::new(vec![c], dg).unwrap(), grads);
                }
                if needs(beta) {
                    let mut db = vec![0.0; c];
                    for (i, &gy) in g.data().iter().enumerate() {
                        db[(i / hw) % c] += gy;
                    }
                    add_to(beta, Tensor::new(vec![c], db).unwrap(), grads);
                }
            }
            Op::Relu => {
                let x = node.inputs[0];
                let dx = self.elementwise_grad(x, g, |xv, _| if xv > 0.0 { 1.0 } else { 0.0 }, i);
                add_to(x, dx, grads);
            }
            Op::LeakyRelu { slope } => {
                let x = node.inputs[0];
                let s = *slope;
                let dx = self.elementwise_grad(x, g, move |xv, _| if xv > 0.0 { 1.0 } else { s }, i);
                add_to(x, dx, grads);
            }
            Op::Tanh => {
                let x = node.inputs[0];
                let dx = self.elementwise_grad(x, g, |_, yv| 1.0 - yv * yv, i);
                add_to(x, dx, grads);
            }
            Op::Sigmoid => {
                let x = node.inputs[0];
                let dx = self.elementwise_grad(x, g, |_, yv| yv * (1.0 - yv), i);
                add_to(x, dx, grads);
            }
            Op::Ln => {
                let x = node.inputs[0];
                let dx = self.elementwise_grad(x, g, |xv, _| 1.0 / xv, i);
                add_to(x, dx, grads);
            }
            Op::Abs => {
                let x = node.inputs[0];
                let dx = self.elementwise_grad(
                    x,
                    g,
                    |xv, _| {
                        if xv > 0.0 {
                            1.0
                        } else if xv < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    },
                    i,
                );
                add_to(x, dx, grads);
            }
            Op::Clamp { lo, hi } => {
                let x = node.inputs[0];
                let (lo, hi) = (*lo, *hi);
                let dx = self.elementwise_grad(
                    x,
                    g,
                    move |xv, _| if xv >= lo && xv <= hi { 1.0 } else { 0.0 },
                    i,
                );
                add_to(x, dx, grads);
            }
            Op::Scale { c } => {
                let x = node.inputs[0];
                let c = *c;
                add_to(x, g.map(|v| c * v), grads);
            }
            Op::AddConst => {
                add_to(node.inputs[0], g.clone(), grads);
            }
            Op::Add => {
                if needs(node.inputs[0]) {
                    add_to(node.inputs[0], g.clone(), grads);
                }
                if needs(node.inputs[1]) {
                    add_to(node.inputs[1], g.clone(), grads);
                }
            }
            Op::Sub => {
                if needs(node.inputs[0]) {
                    add_to(node.inputs[0], g.clone(), grads);
                }
                if needs(node.inputs[1]) {
                    add_to(node.inputs[1], g.map(|v| -v), grads);
                }
            }
            Op::Reshape => {
                let x = node.inputs[0];
                let dx = g.reshaped(self.shape_of(x)).expect("reshape grad");
                add_to(x, dx, grads);
            }
            Op::ReduceSum => {
                let x = node.inputs[0];
                let dx = Tensor::filled(self.shape_of(x), g.scalar_value());
                add_to(x, dx, grads);
            }
        }
    }

    /// dL/dx for a unary elementwise op with local derivative f(x, y).
    fn elementwise_grad(
        &self,
        x: NodeId,
        g: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        node_idx: usize,
    ) -> Tensor {
        let xv = self.value(x).data();
        let yv = self.nodes[node_idx].value.data();
        let mut dx = Tensor::zeros(self.shape_of(x));
        for (i, d) in dx.data_mut().iter_mut().enumerate() {
            *d = g.data()[i] * f(xv[i], yv[i]);
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_and_sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[3]), false);
        let t = g.tanh(x);
        let s = g.sigmoid(x);
        assert!(g.value(t).data().iter().all(|&v| v == 0.0));
        assert!(g.value(s).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn reduce_sum_gradient_is_ones() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap(), true);
        let loss = g.reduce_sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn tanh_gradient_at_zero_is_ones() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::zeros(&[4]), true);
        let t = g.tanh(p);
        let loss = g.reduce_sum(t);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::zeros(&[4]), true);
        let t = g.tanh(p);
        assert!(matches!(
            g.backward(t),
            Err(Error::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn conv2d_identity_kernel_through_graph() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new(vec![1, 1, 4, 4], (0..16).map(|i| i as f64).collect()).unwrap(),
            false,
        );
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0;
        let w = g.leaf(Tensor::new(vec![1, 1, 3, 3], kd).unwrap(), false);
        let y = g.conv2d(x, w, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        assert_eq!(g.value(y).shape(), &[1, 1, 4, 4]);
    }

    #[test]
    fn shape_mismatch_reports_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]), false);
        let b = g.leaf(Tensor::zeros(&[4, 5]), false);
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..32).map(|i| (i as f64) * 0.37 - 3.0).collect();
        let x = g.leaf(Tensor::new(vec![2, 2, 2, 4], data).unwrap(), false);
        let gamma = g.leaf(Tensor::filled(&[2], 1.0), false);
        let beta = g.leaf(Tensor::zeros(&[2]), false);
        let y = g.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        // per-channel mean ~0, variance ~1
        let yv = g.value(y).data();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..32)
                .filter(|i| (i / 8) % 2 == ch)
                .map(|i| yv[i])
                .collect();
            let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let v: f64 = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6, "mean {m}");
            assert!((v - 1.0).abs() < 1e-4, "var {v}");
        }
    }

    #[test]
    fn gradient_stops_at_no_grad_leaves() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::filled(&[3], 2.0), true);
        let b = g.leaf(Tensor::filled(&[3], 5.0), false);
        let s = g.add(a, b).unwrap();
        let loss = g.reduce_sum(s);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(a).is_some());
        assert!(grads.get(b).is_none());
    }
}
