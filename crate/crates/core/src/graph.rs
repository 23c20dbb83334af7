//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every operation in creation order, so node ids are
//! already a topological order. [`Graph::backward`] walks the tape once in
//! reverse and accumulates gradients into every node that requires them.

use crate::error::{Error, Result};
use crate::kernels::{self, Conv2dGeom, PoolGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, b: Option<Var>, geom: Conv2dGeom },
    Conv1d { x: Var, k: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    GlobalAvgPool { x: Var },
    Add { a: Var, b: Var },
    MulChannel { x: Var, w: Var },
    Sigmoid { x: Var },
    Relu { x: Var },
    Concat { parts: Vec<Var> },
    Scale { x: Var, factor: f64 },
    Sum { x: Var },
    Reshape { x: Var },
    SoftmaxXent { logits: Var, classes: Vec<usize>, probs: Vec<f64> },
    ThresholdXent { h: Var, thresholds: Vec<f64>, targets: Vec<f64>, scale: f64 },
    AbsError { h: Var, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Selectable elementwise operations; see [`Graph::eltwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Eltwise {
    Add,
    MulChannelBroadcast,
    Sigmoid,
    Relu,
    ConcatChannels,
}

/// A single-threaded computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic function, evaluated without overflow for large `|z|`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
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

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Copies the value of `x` into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    /// Hash of every piecewise decision on the tape: ReLU masks, max-pool
    /// winners and L1 signs. Two evaluations with equal signatures lie on
    /// the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu { x } => {
                    i.hash(&mut h);
                    self.value(*x).data().iter().for_each(|&v| (v > 0.0).hash(&mut h));
                }
                Op::MaxPool { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::AbsError { h: x, targets } => {
                    i.hash(&mut h);
                    self.value(*x)
                        .data()
                        .iter()
                        .zip(targets)
                        .for_each(|(a, t)| (a > t).hash(&mut h));
                }
                _ => {}
            }
        }
        h.finish()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`; zeros if nothing flowed into it.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(node.value.shape().to_vec()),
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let rg = self.any_grad(inputs);
        self.push(value, rg, op)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- operations ------------------------------------------------------

    /// `x·w + b` for `x` N×D_in, `w` D_in×D_out, `b` D_out.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let ok = xs.len() == 2 && ws.len() == 2 && bs.len() == 1 && xs[1] == ws[0] && ws[1] == bs[0];
        if !ok {
            return Err(Error::shape(
                "affine",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}: need N×D_in, D_in×D_out, D_out"),
            ));
        }
        let (n, d_in, d_out) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0; n * d_out];
        for row in out.chunks_exact_mut(d_out.max(1)).take(n) {
            row.copy_from_slice(self.value(b).data());
        }
        kernels::gemm(n, d_in, d_out, self.value(x).data(), false, self.value(w).data(), false, &mut out, true);
        let value = Tensor::new([n, d_out], out)?;
        Ok(self.record(value, &[x, w, b], Op::Affine { x, w, b }))
    }

    /// 2-D cross-correlation of N×C×H×W `x` with a C_out×C×k×k kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x), self.shape(kernel));
        if xs.len() != 4 || ks.len() != 4 || ks[1] != xs[1] || ks[2] != ks[3] {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?}, kernel {ks:?}: need N×C×H×W and C_out×C×k×k"),
            ));
        }
        let k = ks[2];
        if k % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be positive"));
        }
        let (h_out, w_out) = match (
            kernels::window_out(xs[2], k, stride, padding),
            kernels::window_out(xs[3], k, stride, padding),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {k}×{k} larger than padded input {}×{} (padding {padding})", xs[2], xs[3]),
                ))
            }
        };
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != [ks[0]] {
                return Err(Error::shape("conv2d", format!("bias {bs:?} for {} output channels", ks[0])));
            }
        }
        let geom = Conv2dGeom {
            n: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ks[0],
            k,
            stride,
            pad: padding,
            h_out,
            w_out,
        };
        let data = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new([geom.n, geom.c_out, h_out, w_out], data)?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        Ok(self.record(value, &inputs, Op::Conv2d { x, k: kernel, b: bias, geom }))
    }

    /// Length-preserving 1-D convolution of each row of an N×L input.
    /// `padding` must be `(k-1)/2`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, padding: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x), self.shape(kernel));
        if xs.len() != 2 || ks.len() != 1 {
            return Err(Error::shape("conv1d", format!("input {xs:?}, kernel {ks:?}: need N×L and k")));
        }
        let k = ks[0];
        if k % 2 == 0 {
            return Err(Error::shape("conv1d", format!("kernel size {k} must be odd")));
        }
        if padding != (k - 1) / 2 {
            return Err(Error::shape(
                "conv1d",
                format!("padding {padding} does not preserve length for kernel {k}"),
            ));
        }
        let len = xs[1];
        let shape = xs.to_vec();
        let data = if len == 0 {
            Vec::new()
        } else {
            kernels::conv1d_forward(self.value(x).data(), len, self.value(kernel).data())
        };
        let value = Tensor::new(shape, data)?;
        Ok(self.record(value, &[x, kernel], Op::Conv1d { x, k: kernel }))
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(Error::shape("maxpool2d", format!("input {xs:?}: need N×C×H×W")));
        }
        if padding >= k {
            return Err(Error::shape("maxpool2d", format!("padding {padding} must be below window {k}")));
        }
        let (h_out, w_out) = match (
            kernels::window_out(xs[2], k, stride, padding),
            kernels::window_out(xs[3], k, stride, padding),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::shape(
                    "maxpool2d",
                    format!("window {k} (stride {stride}) does not fit {}×{} padded by {padding}", xs[2], xs[3]),
                ))
            }
        };
        let geom = PoolGeom {
            planes: xs[0] * xs[1],
            h: xs[2],
            w: xs[3],
            k,
            stride,
            pad: padding,
            h_out,
            w_out,
        };
        let shape = [xs[0], xs[1], h_out, w_out];
        let (data, argmax) = kernels::maxpool_forward(&geom, self.value(x).data());
        let value = Tensor::new(shape, data)?;
        Ok(self.record(value, &[x], Op::MaxPool { x, argmax }))
    }

    /// Per-channel spatial mean: N×C×H×W → N×C.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 4 || xs[2] == 0 || xs[3] == 0 {
            return Err(Error::shape("global_avg_pool", format!("input {xs:?}: need N×C×H×W, H,W ≥ 1")));
        }
        let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        let data = self
            .value(x)
            .data()
            .chunks_exact(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new([n, c], data)?;
        Ok(self.record(value, &[x], Op::GlobalAvgPool { x }))
    }

    /// Dispatches one of the [`Eltwise`] kinds. Unary kinds take one operand,
    /// `Add` and `MulChannelBroadcast` two, `ConcatChannels` any number.
    pub fn eltwise(&mut self, kind: Eltwise, operands: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if operands.len() == n {
                Ok(())
            } else {
                Err(Error::invalid(format!("{kind:?} takes {n} operands, got {}", operands.len())))
            }
        };
        match kind {
            Eltwise::Add => {
                arity(2)?;
                self.add(operands[0], operands[1])
            }
            Eltwise::MulChannelBroadcast => {
                arity(2)?;
                self.mul_channel(operands[0], operands[1])
            }
            Eltwise::Sigmoid => {
                arity(1)?;
                Ok(self.sigmoid(operands[0]))
            }
            Eltwise::Relu => {
                arity(1)?;
                Ok(self.relu(operands[0]))
            }
            Eltwise::ConcatChannels => self.concat(operands),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.record(value, &[a, b], Op::Add { a, b }))
    }

    /// Scales each channel plane of N×C×H×W `x` by the matching entry of N×C `w`.
    pub fn mul_channel(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 || ws.len() != 2 || xs[..2] != ws[..] {
            return Err(Error::shape("mul_channel_broadcast", format!("input {xs:?}, weights {ws:?}")));
        }
        let plane = xs[2] * xs[3];
        let shape = xs.to_vec();
        let wd = self.value(w).data();
        let data = if plane == 0 {
            Vec::new()
        } else {
            self.value(x)
                .data()
                .chunks_exact(plane)
                .zip(wd)
                .flat_map(|(p, s)| p.iter().map(move |v| v * s))
                .collect()
        };
        let value = Tensor::new(shape, data)?;
        Ok(self.record(value, &[x, w], Op::MulChannel { x, w }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&z| sigmoid(z)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.record(value, &[x], Op::Sigmoid { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&z| z.max(0.0)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.record(value, &[x], Op::Relu { x })
    }

    /// Concatenation along axis 1. All parts must agree on every other axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.shape(p).to_vec(),
            None => return Err(Error::invalid("concat: no operands")),
        };
        if first.len() < 2 {
            return Err(Error::shape("concat_channels", format!("operand {first:?} has no axis 1")));
        }
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(Error::shape("concat_channels", format!("{s:?} does not line up with {first:?}")));
            }
        }
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut data = Vec::with_capacity(n * total * inner);
        for s in 0..n {
            for &p in parts {
                let block = self.shape(p)[1] * inner;
                data.extend_from_slice(&self.value(p).data()[s * block..(s + 1) * block]);
            }
        }
        let mut shape = first;
        shape[1] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.record(value, parts, Op::Concat { parts: parts.to_vec() }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|z| z * factor).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.record(value, &[x], Op::Scale { x, factor })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.record(Tensor::scalar(total), &[x], Op::Sum { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.record(value, &[x], Op::Reshape { x }))
    }

    /// `Σ_n -log softmax(logits[n])[classes[n]]` via the log-sum-exp form.
    pub fn softmax_xent(&mut self, logits: Var, classes: &[usize]) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.len() != 2 || ls[0] != classes.len() {
            return Err(Error::shape(
                "softmax_xent",
                format!("logits {ls:?} for {} class labels", classes.len()),
            ));
        }
        let c = ls[1];
        if let Some((n, &bad)) = classes.iter().enumerate().find(|(_, &k)| k >= c) {
            return Err(Error::invalid(format!("softmax_xent: class {bad} of sample {n} outside 0..{c}")));
        }
        let mut probs = Vec::with_capacity(classes.len() * c);
        let mut total = 0.0;
        for (row, &k) in self.value(logits).data().chunks_exact(c.max(1)).zip(classes) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[k];
            probs.extend(row.iter().map(|z| (z - lse).exp()));
        }
        let classes = classes.to_vec();
        Ok(self.record(Tensor::scalar(total), &[logits], Op::SoftmaxXent { logits, classes, probs }))
    }

    /// `scale · Σ_n Σ_k BCE(σ(h_n − b_k), y_nk)`, computed with
    /// `-log σ(z) = softplus(-z)` and `-log(1-σ(z)) = softplus(z)`.
    ///
    /// `h` holds N values (any shape with N elements); `targets` is N×K
    /// row-major with entries in {0, 1}.
    pub fn threshold_xent(&mut self, h: Var, thresholds: &[f64], targets: &[f64], scale: f64) -> Result<Var> {
        let n = self.value(h).numel();
        let k = thresholds.len();
        if targets.len() != n * k {
            return Err(Error::shape(
                "threshold_xent",
                format!("{n} outputs × {k} thresholds need {} targets, got {}", n * k, targets.len()),
            ));
        }
        let mut total = 0.0;
        for (&hv, row) in self.value(h).data().iter().zip(targets.chunks_exact(k.max(1))) {
            for (&b, &y) in thresholds.iter().zip(row) {
                let z = hv - b;
                total += y * softplus(-z) + (1.0 - y) * softplus(z);
            }
        }
        let op = Op::ThresholdXent {
            h,
            thresholds: thresholds.to_vec(),
            targets: targets.to_vec(),
            scale,
        };
        Ok(self.record(Tensor::scalar(scale * total), &[h], op))
    }

    /// `Σ_n |h_n − t_n|`.
    pub fn abs_error(&mut self, h: Var, targets: &[f64]) -> Result<Var> {
        let hv = self.value(h);
        if hv.numel() != targets.len() {
            return Err(Error::shape(
                "l1",
                format!("{} outputs for {} targets", hv.numel(), targets.len()),
            ));
        }
        let total = hv.data().iter().zip(targets).map(|(a, b)| (a - b).abs()).sum();
        let op = Op::AbsError {
            h,
            targets: targets.to_vec(),
        };
        Ok(self.record(Tensor::scalar(total), &[h], op))
    }

    // ---- backward --------------------------------------------------------

    /// Seeds `d loss / d loss = 1` and propagates to every node that
    /// requires a gradient. Gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, shape is {:?}", self.shape(loss)),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.accumulate(loss, &[1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.propagate(i, &op, &gout);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(gout);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
            None => node.grad = Some(contrib.to_vec()),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, out: usize, op: &Op, gout: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (n, d_in) = (self.shape(*x)[0], self.shape(*x)[1]);
                let d_out = self.shape(*w)[1];
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * d_in];
                    kernels::gemm(n, d_out, d_in, gout, false, self.value(*w).data(), true, &mut dx, false);
                    self.accumulate(*x, &dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; d_in * d_out];
                    kernels::gemm(d_in, n, d_out, self.value(*x).data(), true, gout, false, &mut dw, false);
                    self.accumulate(*w, &dw);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; d_out];
                    for row in gout.chunks_exact(d_out.max(1)) {
                        db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::Conv2d { x, k, b, geom } => {
                let grads = kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*k).data(),
                    gout,
                    self.wants(*x),
                    self.wants(*k),
                    b.is_some_and(|b| self.wants(b)),
                );
                if let Some(dx) = grads.dx {
                    self.accumulate(*x, &dx);
                }
                if let Some(dk) = grads.dkernel {
                    self.accumulate(*k, &dk);
                }
                if let (Some(b), Some(db)) = (b, grads.dbias) {
                    self.accumulate(*b, &db);
                }
            }
            Op::Conv1d { x, k } => {
                let len = self.shape(*x)[1];
                if len == 0 {
                    return;
                }
                let (dx, dk) = kernels::conv1d_backward(self.value(*x).data(), len, self.value(*k).data(), gout);
                self.accumulate(*x, &dx);
                self.accumulate(*k, &dk);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (&idx, g) in argmax.iter().zip(gout) {
                    dx[idx] += g;
                }
                self.accumulate(*x, &dx);
            }
            Op::GlobalAvgPool { x } => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                let inv = 1.0 / plane as f64;
                let dx: Vec<f64> = gout
                    .iter()
                    .flat_map(|g| std::iter::repeat_n(g * inv, plane))
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Add { a, b } => {
                self.accumulate(*a, gout);
                self.accumulate(*b, gout);
            }
            Op::MulChannel { x, w } => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                if plane == 0 {
                    return;
                }
                if self.wants(*x) {
                    let dx: Vec<f64> = gout
                        .chunks_exact(plane)
                        .zip(self.value(*w).data())
                        .flat_map(|(g, s)| g.iter().map(move |v| v * s))
                        .collect();
                    self.accumulate(*x, &dx);
                }
                if self.wants(*w) {
                    let dw: Vec<f64> = gout
                        .chunks_exact(plane)
                        .zip(self.value(*x).data().chunks_exact(plane))
                        .map(|(g, xv)| g.iter().zip(xv).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(*w, &dw);
                }
            }
            Op::Sigmoid { x } => {
                let y = self.nodes[out].value.data();
                let dx: Vec<f64> = y.iter().zip(gout).map(|(s, g)| g * s * (1.0 - s)).collect();
                self.accumulate(*x, &dx);
            }
            Op::Relu { x } => {
                let dx: Vec<f64> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(z, g)| if *z > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Concat { parts } => {
                let outer = self.nodes[out].value.shape();
                let n = outer[0];
                let inner: usize = outer[2..].iter().product();
                let total = outer[1] * inner;
                let mut offset = 0;
                for &p in parts {
                    let block = self.shape(p)[1] * inner;
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(n * block);
                        for s in 0..n {
                            dp.extend_from_slice(&gout[s * total + offset..s * total + offset + block]);
                        }
                        self.accumulate(p, &dp);
                    }
                    offset += block;
                }
            }
            Op::Scale { x, factor } => {
                let dx: Vec<f64> = gout.iter().map(|g| g * factor).collect();
                self.accumulate(*x, &dx);
            }
            Op::Sum { x } => {
                let dx = vec![gout[0]; self.value(*x).numel()];
                self.accumulate(*x, &dx);
            }
            Op::Reshape { x } => self.accumulate(*x, gout),
            Op::SoftmaxXent { logits, classes, probs } => {
                let c = self.shape(*logits)[1];
                let mut d = probs.clone();
                for (row, &k) in d.chunks_exact_mut(c.max(1)).zip(classes) {
                    row[k] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= gout[0]);
                }
                self.accumulate(*logits, &d);
            }
            Op::ThresholdXent {
                h,
                thresholds,
                targets,
                scale,
            } => {
                let k = thresholds.len().max(1);
                let dh: Vec<f64> = self
                    .value(*h)
                    .data()
                    .iter()
                    .zip(targets.chunks_exact(k))
                    .map(|(&hv, row)| {
                        let s: f64 = thresholds.iter().zip(row).map(|(&b, &y)| sigmoid(hv - b) - y).sum();
                        s * scale * gout[0]
                    })
                    .collect();
                self.accumulate(*h, &dh);
            }
            Op::AbsError { h, targets } => {
                let dh: Vec<f64> = self
                    .value(*h)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(a, t)| {
                        let d = a - t;
                        let s = if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        s * gout[0]
                    })
                    .collect();
                self.accumulate(*h, &dh);
            }
        }
    }
}
