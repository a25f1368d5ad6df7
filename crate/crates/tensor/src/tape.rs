//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards from the
//! root visits every node after all of its consumers. A tape may be differentiated
//! exactly once; build a new tape (re-run the forward pass) for another backward.

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeometry};
use crate::params::ParamId;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Leaf {
    Constant,
    Input,
    Param(ParamId),
}

#[derive(Debug)]
enum Op {
    Leaf(Leaf),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Square(Var),
    Abs(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    ConcatBatch(Vec<Var>),
    SliceBatch(Var, usize),
    ConcatChannels(Vec<Var>),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    Linear { x: Var, w: Var, b: Option<Var> },
    GlobalAvgPool(Var),
    InstanceNorm { x: Var, inv_std: Vec<f64> },
    Upsample2x(Var),
    Softmax(Var),
    LogSoftmax(Var),
    SpectralNorm { w: Var, u: Vec<f64>, v: Vec<f64>, sigma: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Square(_) => "square",
            Op::Abs(_) => "abs",
            Op::Softplus(_) => "softplus",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Reshape(_) => "reshape",
            Op::ConcatBatch(_) => "concat_batch",
            Op::SliceBatch(..) => "slice_batch",
            Op::ConcatChannels(_) => "concat_channels",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Upsample2x(_) => "upsample_nearest2x",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::SpectralNorm { .. } => "spectral_norm",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    non_finite: Option<&'static str>,
}

/// Gradients of a scalar root with respect to every gradient-tracking leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: Vec<(Var, Option<ParamId>, Vec<f64>)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.leaves.iter().find(|(v, _, _)| *v == var).map(|(_, _, g)| g.as_slice())
    }

    /// Gradient for `var`, or zeros when the root does not depend on it.
    pub fn get_or_zeros(&self, tape: &Tape, var: Var) -> Vec<f64> {
        self.get(var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(var).numel()])
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.leaves.iter().filter_map(|(_, p, g)| p.map(|id| (id, g.as_slice())))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn dims4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(TensorError::shape(op, format!("expected NCHW, got {s:?}"))),
    }
}

fn rows_cols(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, k] => Ok((n, k)),
        ref s => Err(TensorError::shape(op, format!("expected 2-D, got {s:?}"))),
    }
}

fn softmax_rows(data: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, dst) in data.chunks(width).zip(out.chunks_mut(width)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = (x - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Name of the first op that produced a NaN or infinity, if any.
    pub fn non_finite_op(&self) -> Option<&'static str> {
        self.non_finite
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(op.name());
        }
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf(Leaf::Constant), false)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf(Leaf::Input), true)
    }

    pub(crate) fn param_leaf(&mut self, id: ParamId, value: Tensor, requires_grad: bool) -> Var {
        let leaf = if requires_grad { Leaf::Param(id) } else { Leaf::Constant };
        self.push(value, Op::Leaf(leaf), requires_grad)
    }

    /// Re-record the value of `var` as a constant, cutting the gradient path.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.value(var).clone();
        self.constant(value)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    /// `a - target` for a constant target of the same shape.
    pub fn sub_const(&mut self, a: Var, target: Tensor) -> Result<Var> {
        let t = self.constant(target);
        self.sub(a, t)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, factor: Tensor) -> Result<Var> {
        let t = self.constant(factor);
        self.mul(a, t)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(v, op, rg)
    }

    /// ReLU with subgradient 0 at the origin.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), kernels::sigmoid)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), kernels::softplus)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Flatten everything but the leading axis.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(a, &[n, rest])
    }

    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::cat_batch(&tensors)?;
        let rg = self.rg(parts);
        Ok(self.push(v, Op::ConcatBatch(parts.to_vec()), rg))
    }

    pub fn slice_batch(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_batch(start, len)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::SliceBatch(a, start), rg))
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::invalid("concat_channels of zero tensors"));
        }
        let (n, _, h, w) = dims4("concat_channels", self.value(parts[0]))?;
        let mut channels = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = dims4("concat_channels", self.value(p))?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(TensorError::shape(
                    "concat_channels",
                    format!("{:?} vs {:?}", self.shape(parts[0]), self.shape(p)),
                ));
            }
            channels += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * channels * plane);
        for i in 0..n {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[i * c * plane..(i + 1) * c * plane]);
            }
        }
        let v = Tensor::new(&[n, channels, h, w], data)?;
        let rg = self.rg(parts);
        Ok(self.push(v, Op::ConcatChannels(parts.to_vec()), rg))
    }

    /// 2-D convolution of an NCHW input with an `out x in x kh x kw` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        if stride == 0 {
            return Err(TensorError::invalid("conv2d stride must be >= 1"));
        }
        let (n, c, h, wd) = dims4("conv2d", self.value(x))?;
        let (co, ci, kh, kw) = dims4("conv2d", self.value(w))?;
        if ci != c {
            return Err(TensorError::shape("conv2d", format!("input has {c} channels, kernel expects {ci}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(TensorError::shape("conv2d", format!("bias {:?} for {co} outputs", self.shape(b))));
            }
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(TensorError::shape("conv2d", "kernel larger than padded input"));
        }
        let out_h = (h + 2 * pad - kh) / stride + 1;
        let out_w = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeometry { channels: c, height: h, width: wd, kh, kw, stride, pad, out_h, out_w };
        let (rows, cols) = (geom.rows(), geom.cols());
        let mut col_buf = vec![0.0; rows * cols];
        let mut out = vec![0.0; n * co * cols];
        let xin = self.value(x).data();
        let wdat = self.value(w).data();
        for i in 0..n {
            kernels::im2col(&xin[i * c * h * wd..(i + 1) * c * h * wd], &geom, &mut col_buf);
            let dst = &mut out[i * co * cols..(i + 1) * co * cols];
            if let Some(b) = b {
                let bias = self.value(b).data();
                for (o, row) in dst.chunks_mut(cols).enumerate() {
                    row.fill(bias[o]);
                }
            }
            kernels::gemm(co, rows, cols, wdat, false, &col_buf, false, dst, b.is_some());
        }
        let v = Tensor::new(&[n, co, out_h, out_w], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(v, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Fully connected layer: `x [N, in]`, `w [out, in]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, k) = rows_cols("linear", self.value(x))?;
        let (o, wk) = rows_cols("linear", self.value(w))?;
        if wk != k {
            return Err(TensorError::shape("linear", format!("input width {k}, weight expects {wk}")));
        }
        let mut out = vec![0.0; n * o];
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(TensorError::shape("linear", format!("bias {:?} for {o} outputs", self.shape(b))));
            }
            let bias = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bias);
            }
        }
        kernels::gemm(n, k, o, self.value(x).data(), false, self.value(w).data(), true, &mut out, b.is_some());
        let v = Tensor::new(&[n, o], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(v, Op::Linear { x, w, b }, rg))
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("global_avg_pool", self.value(x))?;
        let plane = (h * w) as f64;
        let data = self.value(x).data().chunks(h * w).map(|p| p.iter().sum::<f64>() / plane).collect();
        let v = Tensor::new(&[n, c], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::GlobalAvgPool(x), rg))
    }

    /// Per-sample, per-channel normalization over the spatial axes (no affine).
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (_, _, h, w) = dims4("instance_norm", self.value(x))?;
        let plane = h * w;
        let src = self.value(x);
        let mut out = vec![0.0; src.numel()];
        let mut inv_std = Vec::with_capacity(src.numel() / plane);
        for (p, dst) in src.data().chunks(plane).zip(out.chunks_mut(plane)) {
            let mean = p.iter().sum::<f64>() / plane as f64;
            let var = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (d, &v) in dst.iter_mut().zip(p) {
                *d = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let v = Tensor::new(src.shape(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::InstanceNorm { x, inv_std }, rg))
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("upsample_nearest2x", self.value(x))?;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * 4 * h * w];
        for (p, dst) in src.chunks(h * w).zip(out.chunks_mut(4 * h * w)) {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dst[i * 2 * w + j] = p[(i / 2) * w + j / 2];
                }
            }
        }
        let v = Tensor::new(&[n, c, 2 * h, 2 * w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Upsample2x(x), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let width = *t.shape().last().expect("tensor has at least one axis");
        let v = Tensor::new(t.shape(), softmax_rows(t.data(), width)).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(v, Op::Softmax(x), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let width = *t.shape().last().expect("tensor has at least one axis");
        let mut out = vec![0.0; t.numel()];
        for (row, dst) in t.data().chunks(width).zip(out.chunks_mut(width)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = v - lse;
            }
        }
        let v = Tensor::new(t.shape(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(v, Op::LogSoftmax(x), rg)
    }

    /// `w / sigma` with `sigma = ||W^T u||`, where `W` is `w` viewed as
    /// `out x rest` and `u` is held constant. Gradient flows through `sigma`.
    pub fn spectral_norm(&mut self, w: Var, u: &[f64]) -> Result<Var> {
        let t = self.value(w);
        let rows = t.shape()[0];
        let cols = t.numel() / rows;
        if u.len() != rows {
            return Err(TensorError::shape("spectral_norm", format!("u has {} entries for {rows} rows", u.len())));
        }
        let mut v = vec![0.0; cols];
        kernels::gemm(1, rows, cols, u, false, t.data(), false, &mut v, false);
        let sigma = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if sigma <= 0.0 || !sigma.is_finite() {
            return Err(TensorError::ZeroSpectralNorm(format!("{:?}", t.shape())));
        }
        v.iter_mut().for_each(|x| *x /= sigma);
        let out = t.map(|x| x / sigma);
        let rg = self.rg(&[w]);
        Ok(self.push(out, Op::SpectralNorm { w, u: u.to_vec(), v, sigma }, rg))
    }

    /// Differentiate a scalar root. Consumes the tape: a second call is an error.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if let Some(op) = self.non_finite {
            return Err(TensorError::NonFinite { op, phase: "forward" });
        }
        let root_shape = self.shape(root);
        if root_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarRoot(root_shape.to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: node.op.name(), phase: "backward" });
            }
            self.propagate(idx, g, &mut grads, &mut out);
        }
        out.leaves.reverse();
        Ok(out)
    }

    fn propagate(&self, idx: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>], out: &mut Gradients) {
        let nodes = &self.nodes;
        let value = |v: Var| nodes[v.0].value.data();
        // Accumulate `f`'s contribution into the gradient slot of `v` when it tracks gradients.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        let y = nodes[idx].value.data();

        match &nodes[idx].op {
            Op::Leaf(leaf) => {
                let param = match leaf {
                    Leaf::Param(id) => Some(*id),
                    _ => None,
                };
                out.leaves.push((Var(idx), param, g));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(&g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(&g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (value(*a), value(*b));
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(s, g)| *s += c * g)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                acc(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(s, g)| *s += g))
            }
            Op::Relu(a) => {
                let x = value(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        if x[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                })
            }
            Op::LeakyRelu(a, slope) => {
                let x = value(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += if x[i] > 0.0 { g[i] } else { slope * g[i] };
                    }
                })
            }
            Op::Sigmoid(a) => acc(*a, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Square(a) => {
                let x = value(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += 2.0 * x[i] * g[i];
                    }
                })
            }
            Op::Abs(a) => {
                let x = value(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += if x[i] > 0.0 {
                            g[i]
                        } else if x[i] < 0.0 {
                            -g[i]
                        } else {
                            0.0
                        };
                    }
                })
            }
            Op::Softplus(a) => {
                let x = value(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * kernels::sigmoid(x[i]);
                    }
                })
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(a) => {
                let scale = g[0] / nodes[a.0].value.numel() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += scale))
            }
            Op::ConcatBatch(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.numel();
                    acc(*p, &mut |s| s.iter_mut().zip(&g[offset..offset + len]).for_each(|(s, g)| *s += g));
                    offset += len;
                }
            }
            Op::SliceBatch(a, start) => {
                let inner: usize = nodes[a.0].value.shape()[1..].iter().product();
                let off = start * inner;
                acc(*a, &mut |s| s[off..off + g.len()].iter_mut().zip(&g).for_each(|(s, g)| *s += g))
            }
            Op::ConcatChannels(parts) => {
                let shape = nodes[idx].value.shape();
                let (n, total_c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut c_off = 0;
                for p in parts {
                    let c = nodes[p.0].value.shape()[1];
                    acc(*p, &mut |s| {
                        for i in 0..n {
                            let src = &g[(i * total_c + c_off) * plane..(i * total_c + c_off + c) * plane];
                            s[i * c * plane..(i + 1) * c * plane]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(s, g)| *s += g);
                        }
                    });
                    c_off += c;
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let n = nodes[x.0].value.shape()[0];
                let co = nodes[w.0].value.shape()[0];
                let (rows, cols) = (geom.rows(), geom.cols());
                let in_plane = geom.channels * geom.height * geom.width;
                let xin = value(*x);
                let wdat = value(*w);
                let need_x = nodes[x.0].requires_grad;
                let need_w = nodes[w.0].requires_grad;
                let mut col_buf = vec![0.0; rows * cols];
                let mut dw = vec![0.0; co * rows];
                let mut dx = if need_x { vec![0.0; xin.len()] } else { Vec::new() };
                for i in 0..n {
                    let gi = &g[i * co * cols..(i + 1) * co * cols];
                    if need_w {
                        kernels::im2col(&xin[i * in_plane..(i + 1) * in_plane], geom, &mut col_buf);
                        kernels::gemm(co, cols, rows, gi, false, &col_buf, true, &mut dw, true);
                    }
                    if need_x {
                        kernels::gemm(rows, co, cols, wdat, true, gi, false, &mut col_buf, false);
                        kernels::col2im(&col_buf, geom, &mut dx[i * in_plane..(i + 1) * in_plane]);
                    }
                }
                if need_x {
                    acc(*x, &mut |s| s.iter_mut().zip(&dx).for_each(|(s, d)| *s += d));
                }
                if need_w {
                    acc(*w, &mut |s| s.iter_mut().zip(&dw).for_each(|(s, d)| *s += d));
                }
                if let Some(b) = b {
                    acc(*b, &mut |s| {
                        for (k, chunk) in g.chunks(cols).enumerate() {
                            s[k % co] += chunk.iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::Linear { x, w, b } => {
                let xs = nodes[x.0].value.shape();
                let (n, k) = (xs[0], xs[1]);
                let o = nodes[w.0].value.shape()[0];
                let (xv, wv) = (value(*x), value(*w));
                acc(*x, &mut |s| kernels::gemm(n, o, k, &g, false, wv, false, s, true));
                acc(*w, &mut |s| kernels::gemm(o, n, k, &g, true, xv, false, s, true));
                if let Some(b) = b {
                    acc(*b, &mut |s| {
                        for row in g.chunks(o) {
                            s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                        }
                    });
                }
            }
            Op::GlobalAvgPool(x) => {
                let shape = nodes[x.0].value.shape();
                let plane = shape[2] * shape[3];
                acc(*x, &mut |s| {
                    for (p, &gv) in s.chunks_mut(plane).zip(&g) {
                        let d = gv / plane as f64;
                        p.iter_mut().for_each(|s| *s += d);
                    }
                })
            }
            Op::InstanceNorm { x, inv_std } => {
                let shape = nodes[x.0].value.shape();
                let plane = shape[2] * shape[3];
                let pf = plane as f64;
                acc(*x, &mut |s| {
                    for (k, &is) in inv_std.iter().enumerate() {
                        let r = k * plane..(k + 1) * plane;
                        let (gp, yp) = (&g[r.clone()], &y[r.clone()]);
                        let mean_g = gp.iter().sum::<f64>() / pf;
                        let mean_gy = gp.iter().zip(yp).map(|(a, b)| a * b).sum::<f64>() / pf;
                        for ((s, &gv), &yv) in s[r].iter_mut().zip(gp).zip(yp) {
                            *s += is * (gv - mean_g - yv * mean_gy);
                        }
                    }
                })
            }
            Op::Upsample2x(x) => {
                let shape = nodes[x.0].value.shape();
                let (h, w) = (shape[2], shape[3]);
                acc(*x, &mut |s| {
                    for (p, gp) in s.chunks_mut(h * w).zip(g.chunks(4 * h * w)) {
                        for i in 0..2 * h {
                            for j in 0..2 * w {
                                p[(i / 2) * w + j / 2] += gp[i * 2 * w + j];
                            }
                        }
                    }
                })
            }
            Op::Softmax(x) => {
                let width = *nodes[idx].value.shape().last().unwrap();
                acc(*x, &mut |s| {
                    for ((sr, gr), yr) in s.chunks_mut(width).zip(g.chunks(width)).zip(y.chunks(width)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for k in 0..width {
                            sr[k] += yr[k] * (gr[k] - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(x) => {
                let width = *nodes[idx].value.shape().last().unwrap();
                acc(*x, &mut |s| {
                    for ((sr, gr), yr) in s.chunks_mut(width).zip(g.chunks(width)).zip(y.chunks(width)) {
                        let total: f64 = gr.iter().sum();
                        for k in 0..width {
                            sr[k] += gr[k] - yr[k].exp() * total;
                        }
                    }
                })
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                // d(W/s) = G/s - <G, W>/s^2 * u v^T
                let wv = value(*w);
                let cols = v.len();
                let inner: f64 = g.iter().zip(wv).map(|(a, b)| a * b).sum();
                let coef = inner / (sigma * sigma);
                acc(*w, &mut |s| {
                    for (r, &ur) in u.iter().enumerate() {
                        for (c, &vc) in v.iter().enumerate() {
                            let k = r * cols + c;
                            s[k] += g[k] / sigma - coef * ur * vc;
                        }
                    }
                })
            }
        }
    }
}
