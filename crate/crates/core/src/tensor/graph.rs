use super::kernels::{self, ConvDims};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `rhs` is repeated cyclically over `lhs` when `broadcast` is set.
    Add { lhs: Var, rhs: Var, broadcast: bool },
    Sub { lhs: Var, rhs: Var, broadcast: bool },
    Mul { lhs: Var, rhs: Var, broadcast: bool },
    Scale { input: Var, factor: f64 },
    AddScalar { input: Var },
    Recip { input: Var },
    ClampMin { input: Var, floor: f64 },
    RoundSte { input: Var },
    Relu { input: Var },
    Sum { input: Var },
    Reshape { input: Var },
    MaxOverAxis { input: Var, argmax: Vec<usize> },
    Matmul { lhs: Var, rhs: Var, m: usize, k: usize, n: usize },
    Conv2d { input: Var, weight: Var, bias: Var, dims: ConvDims },
    Bilinear { input: Var, coords: Var },
    QueryPoints { centers_h: Var, centers_w: Var, delta_h: Var, delta_w: Var },
    GlobalAvgPool { input: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Tape of operations in creation (hence topological) order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Signs of the four query offsets around a cell center, row-major.
const QUERY_SIGNS: [(f64, f64); 4] = [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)];

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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient populated by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn broadcast_rule(&self, op: &'static str, lhs: Var, rhs: Var) -> Result<bool> {
        let (a, b) = (self.shape(lhs), self.shape(rhs));
        if a == b {
            return Ok(false);
        }
        let numel_b: usize = b.iter().product();
        if numel_b == 1 || (b.len() <= a.len() && a[a.len() - b.len()..] == *b) {
            return Ok(true);
        }
        Err(Error::shape(op, format!("cannot broadcast {b:?} onto {a:?}")))
    }

    fn zip_with(&self, lhs: Var, rhs: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let a = self.value(lhs);
        let b = self.value(rhs).data();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b[i % b.len()]))
            .collect();
        Tensor {
            shape: a.shape().to_vec(),
            data,
        }
    }

    fn map(&self, input: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let a = self.value(input);
        Tensor {
            shape: a.shape().to_vec(),
            data: a.data().iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise sum. `rhs` may be a single value or match the trailing
    /// dimensions of `lhs`.
    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let broadcast = self.broadcast_rule("add", lhs, rhs)?;
        let value = self.zip_with(lhs, rhs, |x, y| x + y);
        Ok(self.push(value, Op::Add { lhs, rhs, broadcast }, &[lhs, rhs]))
    }

    pub fn sub(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let broadcast = self.broadcast_rule("sub", lhs, rhs)?;
        let value = self.zip_with(lhs, rhs, |x, y| x - y);
        Ok(self.push(value, Op::Sub { lhs, rhs, broadcast }, &[lhs, rhs]))
    }

    /// Elementwise product with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let broadcast = self.broadcast_rule("mul", lhs, rhs)?;
        let value = self.zip_with(lhs, rhs, |x, y| x * y);
        Ok(self.push(value, Op::Mul { lhs, rhs, broadcast }, &[lhs, rhs]))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let value = self.map(input, |x| x * factor);
        self.push(value, Op::Scale { input, factor }, &[input])
    }

    pub fn add_scalar(&mut self, input: Var, offset: f64) -> Var {
        let value = self.map(input, |x| x + offset);
        self.push(value, Op::AddScalar { input }, &[input])
    }

    pub fn recip(&mut self, input: Var) -> Var {
        let value = self.map(input, |x| 1.0 / x);
        self.push(value, Op::Recip { input }, &[input])
    }

    /// `max(x, floor)`; the gradient is zero wherever the floor is active.
    pub fn clamp_min(&mut self, input: Var, floor: f64) -> Var {
        let value = self.map(input, |x| x.max(floor));
        self.push(value, Op::ClampMin { input, floor }, &[input])
    }

    /// Straight-through rounding: the forward value is `round(x)` (ties away
    /// from zero), the backward pass treats the op as the identity.
    pub fn round_ste(&mut self, input: Var) -> Var {
        let value = self.map(input, f64::round);
        self.push(value, Op::RoundSte { input }, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.map(input, |x| x.max(0.0));
        self.push(value, Op::Relu { input }, &[input])
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { input }, &[input])
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let n = self.value(input).numel() as f64;
        let total = self.sum(input);
        self.scale(total, 1.0 / n)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(input)
            .reshaped(shape)
            .map_err(|_| Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(input))))?;
        Ok(self.push(value, Op::Reshape { input }, &[input]))
    }

    /// Maximum along `axis`, which is removed from the shape. Ties resolve to
    /// the first index, and only that element receives gradient.
    pub fn max_over_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("max_over_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = base;
                for k in 1..len {
                    let idx = base + k * inner;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                data.push(src[best]);
                argmax.push(best);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let value = Tensor { shape: out_shape, data };
        Ok(self.push(value, Op::MaxOverAxis { input, argmax }, &[input]))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.shape(lhs), self.shape(rhs));
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::shape("matmul", format!("{a:?} x {b:?}")));
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut data = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(lhs).data(), false, self.value(rhs).data(), false, &mut data, 0.0);
        let value = Tensor { shape: vec![m, n], data };
        Ok(self.push(value, Op::Matmul { lhs, rhs, m, k, n }, &[lhs, rhs]))
    }

    /// Stride-1 same-size convolution (cross-correlation).
    ///
    /// `input` is `[B, C_in, H, W]`, `weight` is `[C_out, C_in, K_h, K_w]` and
    /// `bias` is `[C_out]`. Both kernel sides must equal `2 * padding + 1`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, padding: usize) -> Result<Var> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        let bs = self.shape(bias);
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {xs:?}, weight {ws:?}: expected 4-d tensors")));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels but weight expects {}", xs[1], ws[1]),
            ));
        }
        if bs != [ws[0]] {
            return Err(Error::shape("conv2d", format!("bias {bs:?} does not match {} output channels", ws[0])));
        }
        if ws[2] != 2 * padding + 1 || ws[3] != 2 * padding + 1 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {}x{} is not same-size for padding {padding}", ws[2], ws[3]),
            ));
        }
        let dims = ConvDims {
            batch: xs[0],
            in_channels: xs[1],
            out_channels: ws[0],
            height: xs[2],
            width: xs[3],
            kernel_h: ws[2],
            kernel_w: ws[3],
            pad_h: padding,
            pad_w: padding,
        };
        let data = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &dims,
        );
        let value = Tensor {
            shape: vec![dims.batch, dims.out_channels, dims.height, dims.width],
            data,
        };
        Ok(self.push(value, Op::Conv2d { input, weight, bias, dims }, &[input, weight, bias]))
    }

    /// Bilinear sampling of `input: [B, C, H, W]` at `coords: [M, 2]`
    /// normalized `(h, w)` positions, producing `[B, C, M]`.
    ///
    /// Pixel `(m, n)` is centered at `(-1 + (2m+1)/H, -1 + (2n+1)/W)`;
    /// positions past the outermost centers replicate the border.
    pub fn bilinear_sample(&mut self, input: Var, coords: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let cs = self.shape(coords);
        if xs.len() != 4 {
            return Err(Error::shape("bilinear_sample", format!("input {xs:?} is not [B, C, H, W]")));
        }
        if cs.len() != 2 || cs[1] != 2 {
            return Err(Error::shape("bilinear_sample", format!("coords {cs:?} is not [M, 2]")));
        }
        let m = cs[0];
        let plan = kernels::sample_plan(self.value(coords).data(), xs[2], xs[3]);
        let data = kernels::bilinear_forward(self.value(input).data(), xs[0] * xs[1], xs[2], xs[3], &plan);
        let value = Tensor {
            shape: vec![xs[0], xs[1], m],
            data,
        };
        Ok(self.push(value, Op::Bilinear { input, coords }, &[input, coords]))
    }

    /// Four query points per output cell, `(c_h ± d_h, c_w ± d_w)`, for every
    /// pair of row center `c_h` and column center `c_w`. The result is
    /// `[n_h * n_w * 4, 2]`, cells in row-major order and the four offsets
    /// ordered `(-,-), (-,+), (+,-), (+,+)`.
    pub fn query_points(&mut self, centers_h: Var, centers_w: Var, delta_h: Var, delta_w: Var) -> Result<Var> {
        for d in [delta_h, delta_w] {
            if self.value(d).numel() != 1 {
                return Err(Error::shape("query_points", "displacements must be single values"));
            }
        }
        let ch = self.value(centers_h).data();
        let cw = self.value(centers_w).data();
        let dh = self.item(delta_h);
        let dw = self.item(delta_w);
        let mut data = Vec::with_capacity(ch.len() * cw.len() * 8);
        for &ph in ch {
            for &pw in cw {
                for (sh, sw) in QUERY_SIGNS {
                    data.push(ph + sh * dh);
                    data.push(pw + sw * dw);
                }
            }
        }
        let value = Tensor {
            shape: vec![ch.len() * cw.len() * 4, 2],
            data,
        };
        Ok(self.push(
            value,
            Op::QueryPoints {
                centers_h,
                centers_w,
                delta_h,
                delta_w,
            },
            &[centers_h, centers_w, delta_h, delta_w],
        ))
    }

    /// Mean over the spatial axes: `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("input {xs:?} is not [B, C, H, W]")));
        }
        let plane = xs[2] * xs[3];
        let data = self
            .value(input)
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor {
            shape: vec![xs[0], xs[1]],
            data,
        };
        Ok(self.push(value, Op::GlobalAvgPool { input }, &[input]))
    }

    /// Mean softmax cross-entropy of `logits: [B, K]` against class ids.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {ls:?} with {} labels", labels.len()),
            ));
        }
        let k = ls[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::shape("softmax_cross_entropy", format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = Vec::with_capacity(labels.len() * k);
        let mut loss = 0.0;
        for (row, &label) in self.value(logits).data().chunks(k).zip(labels) {
            let peak = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&z| (z - peak).exp()).sum();
            loss += denom.ln() - (row[label] - peak);
            probs.extend(row.iter().map(|&z| (z - peak).exp() / denom));
        }
        let value = Tensor::scalar(loss / labels.len() as f64);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a single-valued `loss`. Gradients of earlier calls
    /// are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss has shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = match g {
                Some(data) if node.requires_grad => Some(Tensor {
                    shape: node.value.shape().to_vec(),
                    data,
                }),
                _ => None,
            };
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add { lhs, rhs, broadcast } => {
                self.accumulate(grads, *lhs, |acc| add_into(acc, g));
                self.accumulate(grads, *rhs, |acc| reduce_into(acc, g, *broadcast, |gi, _| gi));
            }
            Op::Sub { lhs, rhs, broadcast } => {
                self.accumulate(grads, *lhs, |acc| add_into(acc, g));
                self.accumulate(grads, *rhs, |acc| reduce_into(acc, g, *broadcast, |gi, _| -gi));
            }
            Op::Mul { lhs, rhs, broadcast } => {
                let a = self.value(*lhs).data();
                let b = self.value(*rhs).data();
                self.accumulate(grads, *lhs, |acc| {
                    for (i, (o, gi)) in acc.iter_mut().zip(g).enumerate() {
                        *o += gi * b[i % b.len()];
                    }
                });
                self.accumulate(grads, *rhs, |acc| reduce_into(acc, g, *broadcast, |gi, i| gi * a[i]));
            }
            Op::Scale { input, factor } => {
                self.accumulate(grads, *input, |acc| {
                    for (o, gi) in acc.iter_mut().zip(g) {
                        *o += gi * factor;
                    }
                });
            }
            Op::AddScalar { input } | Op::Reshape { input } | Op::RoundSte { input } => {
                self.accumulate(grads, *input, |acc| add_into(acc, g));
            }
            Op::Recip { input } => {
                let x = self.value(*input).data();
                self.accumulate(grads, *input, |acc| {
                    for ((o, gi), xi) in acc.iter_mut().zip(g).zip(x) {
                        *o += gi * (-1.0 / (xi * xi));
                    }
                });
            }
            Op::ClampMin { input, floor } => {
                let x = self.value(*input).data();
                self.accumulate(grads, *input, |acc| {
                    for ((o, gi), xi) in acc.iter_mut().zip(g).zip(x) {
                        if xi > floor {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                self.accumulate(grads, *input, |acc| {
                    for ((o, gi), xi) in acc.iter_mut().zip(g).zip(x) {
                        if *xi > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Sum { input } => {
                self.accumulate(grads, *input, |acc| {
                    for o in acc.iter_mut() {
                        *o += g[0];
                    }
                });
            }
            Op::MaxOverAxis { input, argmax } => {
                self.accumulate(grads, *input, |acc| {
                    for (gi, &src) in g.iter().zip(argmax) {
                        acc[src] += gi;
                    }
                });
            }
            Op::Matmul { lhs, rhs, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let a = self.value(*lhs).data();
                let b = self.value(*rhs).data();
                self.accumulate(grads, *lhs, |acc| kernels::gemm(m, n, k, g, false, b, true, acc, 1.0));
                self.accumulate(grads, *rhs, |acc| kernels::gemm(k, m, n, a, true, g, false, acc, 1.0));
            }
            Op::Conv2d { input, weight, bias, dims } => {
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                let mut gx = self.take_buffer(grads, *input);
                let mut gw = self.take_buffer(grads, *weight);
                let mut gb = self.take_buffer(grads, *bias);
                kernels::conv2d_backward(x, w, g, dims, gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut());
                restore(grads, *input, gx);
                restore(grads, *weight, gw);
                restore(grads, *bias, gb);
            }
            Op::Bilinear { input, coords } => {
                let xs = self.shape(*input);
                let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let x = self.value(*input).data();
                let plan = kernels::sample_plan(self.value(*coords).data(), h, w);
                let mut gx = self.take_buffer(grads, *input);
                let mut gc = self.take_buffer(grads, *coords);
                kernels::bilinear_backward(x, planes, h, w, &plan, g, gx.as_deref_mut(), gc.as_deref_mut());
                restore(grads, *input, gx);
                restore(grads, *coords, gc);
            }
            Op::QueryPoints {
                centers_h,
                centers_w,
                delta_h,
                delta_w,
            } => {
                let nh = self.value(*centers_h).numel();
                let nw = self.value(*centers_w).numel();
                let mut g_ch = vec![0.0; nh];
                let mut g_cw = vec![0.0; nw];
                let (mut g_dh, mut g_dw) = (0.0, 0.0);
                let mut pairs = g.chunks_exact(2);
                for gch in g_ch.iter_mut() {
                    for gcw in g_cw.iter_mut() {
                        for (sh, sw) in QUERY_SIGNS {
                            let q = pairs.next().expect("query gradient length");
                            *gch += q[0];
                            *gcw += q[1];
                            g_dh += sh * q[0];
                            g_dw += sw * q[1];
                        }
                    }
                }
                self.accumulate(grads, *centers_h, |acc| add_into(acc, &g_ch));
                self.accumulate(grads, *centers_w, |acc| add_into(acc, &g_cw));
                self.accumulate(grads, *delta_h, |acc| acc[0] += g_dh);
                self.accumulate(grads, *delta_w, |acc| acc[0] += g_dw);
            }
            Op::GlobalAvgPool { input } => {
                let xs = self.shape(*input);
                let plane = xs[2] * xs[3];
                let inv = 1.0 / plane as f64;
                self.accumulate(grads, *input, |acc| {
                    for (chunk, gi) in acc.chunks_mut(plane).zip(g) {
                        for o in chunk {
                            *o += gi * inv;
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = probs.len() / labels.len();
                let scale = g[0] / labels.len() as f64;
                self.accumulate(grads, *logits, |acc| {
                    for (row, (p, &label)) in acc.chunks_mut(k).zip(probs.chunks(k).zip(labels)) {
                        for (j, (o, pj)) in row.iter_mut().zip(p).enumerate() {
                            let target = if j == label { 1.0 } else { 0.0 };
                            *o += scale * (pj - target);
                        }
                    }
                });
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let numel = self.nodes[v.0].value.numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; numel]);
        f(slot);
    }

    fn take_buffer(&self, grads: &mut [Option<Vec<f64>>], v: Var) -> Option<Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let numel = self.nodes[v.0].value.numel();
        Some(grads[v.0].take().unwrap_or_else(|| vec![0.0; numel]))
    }
}

fn restore(grads: &mut [Option<Vec<f64>>], v: Var, buf: Option<Vec<f64>>) {
    if let Some(buf) = buf {
        grads[v.0] = Some(buf);
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (o, gi) in acc.iter_mut().zip(g) {
        *o += gi;
    }
}

/// Folds a full-size gradient onto a (possibly broadcast) operand.
fn reduce_into(acc: &mut [f64], g: &[f64], broadcast: bool, f: impl Fn(f64, usize) -> f64) {
    if broadcast {
        let n = acc.len();
        for (i, &gi) in g.iter().enumerate() {
            acc[i % n] += f(gi, i);
        }
    } else {
        for (i, (o, &gi)) in acc.iter_mut().zip(g).enumerate() {
            *o += f(gi, i);
        }
    }
}
