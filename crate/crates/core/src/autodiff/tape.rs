//! Reverse-mode tape.
//!
//! Every primitive records its inputs (by node index) plus whatever it needs
//! from the forward pass; `backward` walks the nodes in reverse creation
//! order and accumulates gradients into the parameter leaves.

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution over NHWC input and `[kh, kw, cin, cout]` kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_c: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k_w) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.k_h * self.k_w * self.in_c
    }

    fn out_rows(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }
}

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul { a: usize, b: usize, trans_b: bool },
    AddBias { x: usize, bias: usize },
    ChannelAffine { x: usize, scale: usize, shift: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: T },
    AddScalar { x: usize },
    Relu { x: usize },
    Sigmoid { x: usize },
    Tanh { x: usize },
    Map { x: usize, df: fn(T) -> T },
    Conv2d { x: usize, w: usize, geom: ConvGeom, cols: Vec<T> },
    Normalize { x: usize, layout: NormLayout, xhat: Vec<T>, inv_std: Vec<T> },
    MeanAxis { x: usize, outer: usize, n: usize, inner: usize },
    Reshape { x: usize },
    SumAll { x: usize },
    MeanAll { x: usize },
    SoftmaxCe { logits: usize, targets: Vec<usize>, probs: Vec<T> },
    LogSumExpRows { x: usize, weights: Vec<T> },
    SigmoidBce { logits: usize, labels: Vec<T> },
    InfoNce { x: usize, positives: Vec<usize>, weights: Vec<T> },
    L2NormalizeRows { x: usize, norms: Vec<T> },
    Concat { parts: Vec<usize> },
    SliceCols { x: usize, start: usize },
    Gather { x: usize, idx: Vec<usize> },
    PairwiseSqDist { x: usize },
}

/// Which elements share a mean/variance in a normalization primitive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormLayout {
    /// `[batch, spatial, channels]`, statistics per (sample, channel group).
    Group { batch: usize, groups: usize },
    /// Statistics per channel over all rows (batch normalization, training mode).
    Channel,
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::AddBias { .. } => "add_bias",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::Map { .. } => "map",
            Op::Conv2d { .. } => "conv2d",
            Op::Normalize {
                layout: NormLayout::Group { .. },
                ..
            } => "group_norm",
            Op::Normalize { .. } => "channel_norm",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Reshape { .. } => "reshape",
            Op::SumAll { .. } => "sum",
            Op::MeanAll { .. } => "mean",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::LogSumExpRows { .. } => "log_sum_exp",
            Op::SigmoidBce { .. } => "sigmoid_bce",
            Op::InfoNce { .. } => "info_nce",
            Op::L2NormalizeRows { .. } => "l2_normalize",
            Op::Concat { .. } => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::Gather { .. } => "gather",
            Op::PairwiseSqDist { .. } => "pairwise_sq_dist",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation for a single backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Mean and inverse standard deviation of strided groups, accumulated in f64.
fn moments<T: Real>(values: impl Iterator<Item = T> + Clone, count: usize, eps: f64) -> (f64, f64) {
    let n = count as f64;
    let mean = values.clone().map(|v| v.f64()).sum::<f64>() / n;
    let var = values.map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node: self.nodes.len(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
            .expect("inputs must be finite")
    }

    pub fn try_input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Input, false)
    }

    /// Binds a parameter as a leaf. Non-trainable parameters act as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.tensor.clone(), Op::Param(id), p.trainable)
            .expect("parameters must be finite")
    }

    /// `a · b` (or `a · bᵀ`) over the last axis of `a`; `b` must be 2-D.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sb.len() != 2 {
            return Err(shape_err("matmul", sa, sb));
        }
        let k = *sa.last().unwrap();
        let (bk, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != bk {
            return Err(shape_err("matmul", sa, sb));
        }
        let m = self.val(a).len() / k;
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        out_shape.push(n);
        let mut out = vec![T::zero(); m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        T::gemm(
            m,
            k,
            n,
            self.val(a).data(),
            k as isize,
            1,
            self.val(b).data(),
            rsb,
            csb,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(
            Tensor::new(out_shape, out),
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b,
            },
            rg,
        )
    }

    /// Adds a `[cols]` bias to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.val(x).shape(), self.val(bias).shape());
        let c = self.val(x).cols();
        if self.val(bias).len() != c {
            return Err(shape_err("add_bias", sx, sb));
        }
        let b = self.val(bias).data().to_vec();
        let mut out = self.val(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bb) in row.iter_mut().zip(&b) {
                *o += bb;
            }
        }
        let rg = self.rg(x.0) || self.rg(bias.0);
        self.push(out, Op::AddBias { x: x.0, bias: bias.0 }, rg)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w, false)?;
        self.add_bias(y, b)
    }

    /// `x[.., c] * scale[c] + shift[c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let c = self.val(x).cols();
        if self.val(scale).len() != c || self.val(shift).len() != c {
            return Err(shape_err(
                "channel_affine",
                self.val(x).shape(),
                self.val(scale).shape(),
            ));
        }
        let s = self.val(scale).data().to_vec();
        let t = self.val(shift).data().to_vec();
        let mut out = self.val(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for j in 0..c {
                row[j] = row[j] * s[j] + t[j];
            }
        }
        let rg = self.rg(x.0) || self.rg(scale.0) || self.rg(shift.0);
        self.push(
            out,
            Op::ChannelAffine {
                x: x.0,
                scale: scale.0,
                shift: shift.0,
            },
            rg,
        )
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::new(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(out, Op::Add { a: a.0, b: b.0 }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(out, Op::Sub { a: a.0, b: b.0 }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(out, Op::Mul { a: a.0, b: b.0 }, rg)
    }

    fn unary(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.val(x);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.unary(x, |v| v * c);
        let rg = self.rg(x.0);
        self.push(out, Op::Scale { x: x.0, c }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.unary(x, |v| v + c);
        let rg = self.rg(x.0);
        self.push(out, Op::AddScalar { x: x.0 }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.unary(x, |v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x.0);
        self.push(out, Op::Relu { x: x.0 }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.unary(x, sigmoid);
        let rg = self.rg(x.0);
        self.push(out, Op::Sigmoid { x: x.0 }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.unary(x, |v| v.tanh());
        let rg = self.rg(x.0);
        self.push(out, Op::Tanh { x: x.0 }, rg)
    }

    /// Elementwise `f` with a caller-supplied derivative `df` (evaluated at the input).
    pub fn map(&mut self, x: Var, f: fn(T) -> T, df: fn(T) -> T) -> Result<Var> {
        let out = self.unary(x, f);
        let rg = self.rg(x.0);
        self.push(out, Op::Map { x: x.0, df }, rg)
    }

    /// NHWC convolution; `w` is `[kh, kw, cin, cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.val(x).shape(), self.val(w).shape());
        if sx.len() != 4 || sw.len() != 4 || sx[3] != sw[2] || stride == 0 {
            return Err(shape_err("conv2d", sx, sw));
        }
        if sx[1] + 2 * pad < sw[0] || sx[2] + 2 * pad < sw[1] {
            return Err(shape_err("conv2d", sx, sw));
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_h: sx[1],
            in_w: sx[2],
            in_c: sx[3],
            k_h: sw[0],
            k_w: sw[1],
            out_c: sw[3],
            stride,
            pad,
        };
        let cols = im2col(self.val(x).data(), &geom);
        let (rows, patch, oc) = (geom.out_rows(), geom.patch(), geom.out_c);
        let mut out = vec![T::zero(); rows * oc];
        T::gemm(
            rows,
            patch,
            oc,
            &cols,
            patch as isize,
            1,
            self.val(w).data(),
            oc as isize,
            1,
            T::zero(),
            &mut out,
            oc as isize,
            1,
        );
        let shape = vec![geom.batch, geom.out_h(), geom.out_w(), oc];
        let rg = self.rg(x.0) || self.rg(w.0);
        self.push(
            Tensor::new(shape, out),
            Op::Conv2d {
                x: x.0,
                w: w.0,
                geom,
                cols,
            },
            rg,
        )
    }

    /// Group normalization without affine terms; `x` is `[batch, .., channels]`.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        let t = self.val(x);
        let c = t.cols();
        if groups == 0 || c % groups != 0 {
            return Err(shape_err("group_norm", t.shape(), &[groups]));
        }
        let layout = NormLayout::Group {
            batch: t.shape()[0],
            groups,
        };
        self.normalize(x, layout, eps)
    }

    /// Per-channel normalization over all rows: batch norm in training mode.
    /// Returns the normalized node; batch statistics via [`Tape::norm_stats`].
    pub fn channel_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.normalize(x, NormLayout::Channel, eps)
    }

    /// Per-output-channel standardization of a kernel whose last axis is the output channel.
    pub fn weight_standardize(&mut self, w: Var, eps: f64) -> Result<Var> {
        self.normalize(w, NormLayout::Channel, eps)
    }

    fn normalize(&mut self, x: Var, layout: NormLayout, eps: f64) -> Result<Var> {
        let t = self.val(x);
        let c = t.cols();
        let data = t.data();
        let mut out = vec![T::zero(); data.len()];
        let inv_std = match layout {
            NormLayout::Group { batch, groups } => {
                let per = c / groups;
                let spatial = data.len() / (batch * c);
                let mut inv = Vec::with_capacity(batch * groups);
                for b in 0..batch {
                    let base = b * spatial * c;
                    for g in 0..groups {
                        let idx = (0..spatial)
                            .flat_map(move |s| (0..per).map(move |j| base + s * c + g * per + j));
                        let (mean, is) =
                            moments(idx.clone().map(|i| data[i]), spatial * per, eps);
                        for i in idx {
                            out[i] = T::of((data[i].f64() - mean) * is);
                        }
                        inv.push(T::of(is));
                    }
                }
                inv
            }
            NormLayout::Channel => {
                let rows = data.len() / c;
                let mut inv = Vec::with_capacity(c);
                // Two-pass statistics per channel, vectorized over rows.
                let mut mean = vec![0f64; c];
                for row in data.chunks(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v.f64();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0f64; c];
                for row in data.chunks(c) {
                    for j in 0..c {
                        var[j] += (row[j].f64() - mean[j]).powi(2);
                    }
                }
                let is: Vec<f64> = var
                    .iter()
                    .map(|v| 1.0 / (v / rows as f64 + eps).sqrt())
                    .collect();
                for (orow, row) in out.chunks_mut(c).zip(data.chunks(c)) {
                    for j in 0..c {
                        orow[j] = T::of((row[j].f64() - mean[j]) * is[j]);
                    }
                }
                inv.extend(is.iter().map(|&v| T::of(v)));
                inv
            }
        };
        let shape = t.shape().to_vec();
        let rg = self.rg(x.0);
        self.push(
            Tensor::new(shape, out.clone()),
            Op::Normalize {
                x: x.0,
                layout,
                xhat: out,
                inv_std,
            },
            rg,
        )
    }

    /// Per-channel (mean, variance) of the input of a `channel_norm` node.
    pub fn norm_stats(&self, v: Var) -> Option<(Vec<T>, Vec<T>)> {
        match &self.nodes[v.0].op {
            Op::Normalize {
                x,
                layout: NormLayout::Channel,
                ..
            } => {
                let t = &self.nodes[*x].value;
                let c = t.cols();
                let rows = t.rows() as f64;
                let mut mean = vec![0f64; c];
                for row in t.data().chunks(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v.f64();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows);
                let mut var = vec![0f64; c];
                for row in t.data().chunks(c) {
                    for j in 0..c {
                        var[j] += (row[j].f64() - mean[j]).powi(2);
                    }
                }
                Some((
                    mean.into_iter().map(T::of).collect(),
                    var.into_iter().map(|v| T::of(v / rows)).collect(),
                ))
            }
            _ => None,
        }
    }

    /// Mean over the middle axis of `x` viewed as `[outer, n, inner]`.
    pub fn mean_axis(&mut self, x: Var, outer: usize, n: usize, inner: usize, out_shape: Vec<usize>) -> Result<Var> {
        let t = self.val(x);
        if outer * n * inner != t.len() || n == 0 || out_shape.iter().product::<usize>() != outer * inner {
            return Err(shape_err("mean_axis", t.shape(), &[outer, n, inner]));
        }
        let d = t.data();
        let inv = T::of(1.0 / n as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for k in 0..n {
                let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (a, &b) in dst.iter_mut().zip(src) {
                    *a += b;
                }
            }
            dst.iter_mut().for_each(|a| *a = *a * inv);
        }
        let rg = self.rg(x.0);
        self.push(
            Tensor::new(out_shape, out),
            Op::MeanAxis {
                x: x.0,
                outer,
                n,
                inner,
            },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.val(x);
        if shape.iter().product::<usize>() != t.len() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err("reshape", t.shape(), &shape));
        }
        let out = t.clone().reshaped(shape);
        let rg = self.rg(x.0);
        self.push(out, Op::Reshape { x: x.0 }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x).data().iter().fold(T::zero(), |a, &b| a + b);
        let rg = self.rg(x.0);
        self.push(Tensor::scalar(s), Op::SumAll { x: x.0 }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x);
        let s = t.data().iter().fold(T::zero(), |a, &b| a + b) / T::of(t.len() as f64);
        let rg = self.rg(x.0);
        self.push(Tensor::scalar(s), Op::MeanAll { x: x.0 }, rg)
    }

    /// Mean softmax cross-entropy of `[rows, classes]` logits against class targets.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.val(logits);
        let c = t.cols();
        let r = t.rows();
        if targets.len() != r {
            return Err(shape_err("softmax_cross_entropy", t.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(Error::invalid(format!(
                "target class {bad} out of range for {c} classes"
            )));
        }
        let mut probs = vec![T::zero(); r * c];
        let mut loss = 0f64;
        for (i, row) in t.data().chunks(c).enumerate() {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let z: f64 = row.iter().map(|&v| (v - m).f64().exp()).sum();
            let lse = m.f64() + z.ln();
            for j in 0..c {
                probs[i * c + j] = T::of((row[j].f64() - lse).exp());
            }
            loss += lse - row[targets[i]].f64();
        }
        let rg = self.rg(logits.0);
        self.push(
            Tensor::scalar(T::of(loss / r as f64)),
            Op::SoftmaxCe {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Row-wise `log Σ_j exp(x[r, j])`, optionally restricted to `mask[r, j]`.
    pub fn log_sum_exp_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.val(x);
        let c = t.cols();
        let r = t.rows();
        if let Some(m) = mask {
            if m.len() != t.len() {
                return Err(shape_err("log_sum_exp", t.shape(), &[m.len()]));
            }
        }
        let keep = |i: usize| mask.map_or(true, |m| m[i]);
        let mut out = Vec::with_capacity(r);
        let mut weights = vec![T::zero(); r * c];
        for (i, row) in t.data().chunks(c).enumerate() {
            let mut mx = f64::NEG_INFINITY;
            for j in 0..c {
                if keep(i * c + j) {
                    mx = mx.max(row[j].f64());
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(Error::invalid(format!("log_sum_exp: row {i} has no unmasked entries")));
            }
            let z: f64 = (0..c)
                .filter(|&j| keep(i * c + j))
                .map(|j| (row[j].f64() - mx).exp())
                .sum();
            let lse = mx + z.ln();
            for j in 0..c {
                if keep(i * c + j) {
                    weights[i * c + j] = T::of((row[j].f64() - lse).exp());
                }
            }
            out.push(T::of(lse));
        }
        let rg = self.rg(x.0);
        self.push(
            Tensor::new(vec![r], out),
            Op::LogSumExpRows { x: x.0, weights },
            rg,
        )
    }

    /// Mean over rows of `−log( exp(x[r, p_r]) / ((1/M_r) Σ_{j∈mask_r} exp(x[r, j])) )`
    /// where `M_r` is the number of candidates in row `r`. The positive column
    /// must be among the candidates.
    pub fn info_nce(&mut self, x: Var, positives: &[usize], mask: Option<&[bool]>) -> Result<Var> {
        let t = self.val(x);
        let c = t.cols();
        let r = t.rows();
        if t.shape().len() != 2 || positives.len() != r || mask.is_some_and(|m| m.len() != t.len()) {
            return Err(shape_err("info_nce", t.shape(), &[positives.len()]));
        }
        let keep = |i: usize| mask.map_or(true, |m| m[i]);
        let mut weights = vec![T::zero(); r * c];
        let mut total = 0.0;
        for (i, row) in t.data().chunks(c).enumerate() {
            let p = positives[i];
            if p >= c || !keep(i * c + p) {
                return Err(Error::invalid(format!("info_nce: row {i} positive {p} is not a candidate")));
            }
            let cols: Vec<usize> = (0..c).filter(|&j| keep(i * c + j)).collect();
            let mx = cols.iter().map(|&j| row[j].f64()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = cols.iter().map(|&j| (row[j].f64() - mx).exp()).sum();
            for &j in &cols {
                weights[i * c + j] = T::of((row[j].f64() - mx).exp() / z);
            }
            total += (mx - row[p].f64()) + (z.ln() - (cols.len() as f64).ln());
        }
        let rg = self.rg(x.0);
        self.push(
            Tensor::scalar(T::of(total / r as f64)),
            Op::InfoNce {
                x: x.0,
                positives: positives.to_vec(),
                weights,
            },
            rg,
        )
    }

    /// Mean binary cross-entropy of logits against 0/1 labels.
    pub fn sigmoid_bce(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let t = self.val(logits);
        if labels.len() != t.len() {
            return Err(shape_err("sigmoid_bce", t.shape(), &[labels.len()]));
        }
        let loss: f64 = t
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| {
                let z = z.f64();
                z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
            })
            .sum::<f64>()
            / t.len() as f64;
        let rg = self.rg(logits.0);
        self.push(
            Tensor::scalar(T::of(loss)),
            Op::SigmoidBce {
                logits: logits.0,
                labels: labels.iter().map(|&v| T::of(v)).collect(),
            },
            rg,
        )
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x);
        let c = t.cols();
        let mut out = t.clone();
        let mut norms = Vec::with_capacity(t.rows());
        for row in out.data_mut().chunks_mut(c) {
            let n = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt().max(1e-12);
            let inv = T::of(1.0 / n);
            row.iter_mut().for_each(|v| *v = *v * inv);
            norms.push(T::of(n));
        }
        let rg = self.rg(x.0);
        self.push(out, Op::L2NormalizeRows { x: x.0, norms }, rg)
    }

    /// Concatenates along the last axis; all parts must have the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let rows = self.val(parts[0]).rows();
        for p in parts {
            if self.val(*p).rows() != rows {
                return Err(shape_err(
                    "concat",
                    self.val(parts[0]).shape(),
                    self.val(*p).shape(),
                ));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| self.val(*p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.val(*p).row(r));
            }
        }
        let mut shape = self.val(parts[0]).shape().to_vec();
        *shape.last_mut().unwrap() = total;
        let rg = parts.iter().any(|p| self.rg(p.0));
        self.push(
            Tensor::new(shape, out),
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            rg,
        )
    }

    /// Columns `start..start + len` of every row.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.val(x);
        let c = t.cols();
        if len == 0 || start + len > c {
            return Err(shape_err("slice_cols", t.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(t.rows() * len);
        for row in t.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(x.0);
        self.push(Tensor::new(shape, out), Op::SliceCols { x: x.0, start }, rg)
    }

    /// Selects flat elements of `x`; output is `[idx.len()]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.val(x);
        if idx.is_empty() || idx.iter().any(|&i| i >= t.len()) {
            return Err(shape_err("gather", t.shape(), &[idx.len()]));
        }
        let out = idx.iter().map(|&i| t.data()[i]).collect();
        let rg = self.rg(x.0);
        self.push(
            Tensor::new(vec![idx.len()], out),
            Op::Gather {
                x: x.0,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// `D[i, j] = Σ_k (x[i, k] - x[j, k])²` over the rows of `x`.
    pub fn pairwise_sq_dist(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x);
        let out = pairwise_sq_dist(t.data(), t.rows(), t.cols());
        let n = t.rows();
        let rg = self.rg(x.0);
        self.push(Tensor::new(vec![n, n], out), Op::PairwiseSqDist { x: x.0 }, rg)
    }

    /// Backpropagates from a scalar output, returning a gradient for every
    /// parameter of `store` (zero where unreachable). A tape supports one
    /// backward pass.
    pub fn backward(&mut self, out: Var, store: &ParamStore<T>) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.nodes[out.0].value.shape();
        if self.nodes[out.0].value.len() != 1 {
            return Err(Error::NonScalar(shape.to_vec()));
        }
        self.consumed = true;
        let mut result = Gradients::zeros_like(store);
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(shape, T::one()));

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    op: self.nodes[i].op.name(),
                    node: i,
                });
            }
            if let Op::Param(id) = self.nodes[i].op {
                result.accumulate(id, &g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(result)
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let nodes = &self.nodes;
        let acc = |grads: &mut [Option<Tensor<T>>], j: usize, data: Vec<T>| {
            if !nodes[j].requires_grad {
                return;
            }
            match &mut grads[j] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(data) {
                        *a += b;
                    }
                }
                slot @ None => {
                    *slot = Some(Tensor::new(nodes[j].value.shape().to_vec(), data));
                }
            }
        };
        let v = |j: usize| nodes[j].value.data();

        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let sa = nodes[*a].value.shape();
                let k = *sa.last().unwrap();
                let m = nodes[*a].value.len() / k;
                let n = node.value.cols();
                if self.rg(*a) {
                    // dA = dC · Bᵀ  (or dC · B when B was transposed)
                    let mut da = vec![T::zero(); m * k];
                    let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    T::gemm(m, n, k, gd, n as isize, 1, v(*b), rsb, csb, T::zero(), &mut da, k as isize, 1);
                    acc(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    if *trans_b {
                        // dB[n, k] = dCᵀ · A
                        T::gemm(n, m, k, gd, 1, n as isize, v(*a), k as isize, 1, T::zero(), &mut db, k as isize, 1);
                    } else {
                        // dB[k, n] = Aᵀ · dC
                        T::gemm(k, m, n, v(*a), 1, k as isize, gd, n as isize, 1, T::zero(), &mut db, n as isize, 1);
                    }
                    acc(grads, *b, db);
                }
            }
            Op::AddBias { x, bias } => {
                let c = node.value.cols();
                if self.rg(*bias) {
                    let mut db = vec![T::zero(); c];
                    for row in gd.chunks(c) {
                        for (d, &r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    acc(grads, *bias, db);
                }
                acc(grads, *x, gd.to_vec());
            }
            Op::ChannelAffine { x, scale, shift } => {
                let c = node.value.cols();
                let s = v(*scale);
                if self.rg(*scale) {
                    let mut ds = vec![T::zero(); c];
                    for (row, xr) in gd.chunks(c).zip(v(*x).chunks(c)) {
                        for j in 0..c {
                            ds[j] += row[j] * xr[j];
                        }
                    }
                    acc(grads, *scale, ds);
                }
                if self.rg(*shift) {
                    let mut dt = vec![T::zero(); c];
                    for row in gd.chunks(c) {
                        for j in 0..c {
                            dt[j] += row[j];
                        }
                    }
                    acc(grads, *shift, dt);
                }
                if self.rg(*x) {
                    let dx = gd
                        .chunks(c)
                        .flat_map(|row| row.iter().zip(s).map(|(&a, &b)| a * b))
                        .collect();
                    acc(grads, *x, dx);
                }
            }
            Op::Add { a, b } => {
                acc(grads, *a, gd.to_vec());
                acc(grads, *b, gd.to_vec());
            }
            Op::Sub { a, b } => {
                acc(grads, *a, gd.to_vec());
                acc(grads, *b, gd.iter().map(|&x| -x).collect());
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    acc(grads, *a, gd.iter().zip(v(*b)).map(|(&x, &y)| x * y).collect());
                }
                if self.rg(*b) {
                    acc(grads, *b, gd.iter().zip(v(*a)).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale { x, c } => acc(grads, *x, gd.iter().map(|&d| d * *c).collect()),
            Op::AddScalar { x } | Op::Reshape { x } => acc(grads, *x, gd.to_vec()),
            Op::Relu { x } => acc(
                grads,
                *x,
                gd.iter()
                    .zip(v(*x))
                    .map(|(&d, &xv)| if xv > T::zero() { d } else { T::zero() })
                    .collect(),
            ),
            Op::Sigmoid { x } => acc(
                grads,
                *x,
                gd.iter()
                    .zip(node.value.data())
                    .map(|(&d, &y)| d * y * (T::one() - y))
                    .collect(),
            ),
            Op::Tanh { x } => acc(
                grads,
                *x,
                gd.iter()
                    .zip(node.value.data())
                    .map(|(&d, &y)| d * (T::one() - y * y))
                    .collect(),
            ),
            Op::Map { x, df } => acc(
                grads,
                *x,
                gd.iter().zip(v(*x)).map(|(&d, &xv)| d * df(xv)).collect(),
            ),
            Op::Conv2d { x, w, geom, cols } => {
                let (rows, patch, oc) = (geom.out_rows(), geom.patch(), geom.out_c);
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); patch * oc];
                    T::gemm(patch, rows, oc, cols, 1, patch as isize, gd, oc as isize, 1, T::zero(), &mut dw, oc as isize, 1);
                    acc(grads, *w, dw);
                }
                if self.rg(*x) {
                    let mut dcols = vec![T::zero(); rows * patch];
                    T::gemm(rows, oc, patch, gd, oc as isize, 1, v(*w), 1, oc as isize, T::zero(), &mut dcols, patch as isize, 1);
                    acc(grads, *x, col2im(&dcols, geom));
                }
            }
            Op::Normalize {
                x,
                layout,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols();
                let mut dx = vec![T::zero(); gd.len()];
                // dx = inv_std / n · (n·dy − Σdy − x̂·Σ(dy·x̂)) per statistics group
                match *layout {
                    NormLayout::Group { batch, groups } => {
                        let per = c / groups;
                        let spatial = gd.len() / (batch * c);
                        let n = (spatial * per) as f64;
                        for b in 0..batch {
                            let base = b * spatial * c;
                            for gi in 0..groups {
                                let idx = (0..spatial).flat_map(move |s| {
                                    (0..per).map(move |j| base + s * c + gi * per + j)
                                });
                                let (mut s1, mut s2) = (0f64, 0f64);
                                for i in idx.clone() {
                                    s1 += gd[i].f64();
                                    s2 += gd[i].f64() * xhat[i].f64();
                                }
                                let is = inv_std[b * groups + gi].f64();
                                for i in idx {
                                    dx[i] = T::of(is / n * (n * gd[i].f64() - s1 - xhat[i].f64() * s2));
                                }
                            }
                        }
                    }
                    NormLayout::Channel => {
                        let rows = gd.len() / c;
                        let n = rows as f64;
                        let mut s1 = vec![0f64; c];
                        let mut s2 = vec![0f64; c];
                        for (row, xr) in gd.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                s1[j] += row[j].f64();
                                s2[j] += row[j].f64() * xr[j].f64();
                            }
                        }
                        for ((drow, row), xr) in dx.chunks_mut(c).zip(gd.chunks(c)).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                let is = inv_std[j].f64();
                                drow[j] = T::of(is / n * (n * row[j].f64() - s1[j] - xr[j].f64() * s2[j]));
                            }
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::MeanAxis { x, outer, n, inner } => {
                let inv = T::of(1.0 / *n as f64);
                let mut dx = vec![T::zero(); outer * n * inner];
                for o in 0..*outer {
                    let src = &gd[o * inner..(o + 1) * inner];
                    for k in 0..*n {
                        let dst = &mut dx[(o * n + k) * inner..(o * n + k + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = s * inv;
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::SumAll { x } => acc(grads, *x, vec![gd[0]; nodes[*x].value.len()]),
            Op::MeanAll { x } => {
                let n = nodes[*x].value.len();
                acc(grads, *x, vec![gd[0] / T::of(n as f64); n]);
            }
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            } => {
                let c = nodes[*logits].value.cols();
                let scale = gd[0] / T::of(targets.len() as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dx[r * c + t] = dx[r * c + t] - scale;
                }
                acc(grads, *logits, dx);
            }
            Op::LogSumExpRows { x, weights } => {
                let c = nodes[*x].value.cols();
                let dx = weights
                    .chunks(c)
                    .zip(gd)
                    .flat_map(|(row, &d)| row.iter().map(move |&w| w * d))
                    .collect();
                acc(grads, *x, dx);
            }
            Op::InfoNce { x, positives, weights } => {
                let c = nodes[*x].value.cols();
                let scale = gd[0] / T::of(positives.len() as f64);
                let mut dx: Vec<T> = weights.iter().map(|&w| w * scale).collect();
                for (r, &p) in positives.iter().enumerate() {
                    dx[r * c + p] = dx[r * c + p] - scale;
                }
                acc(grads, *x, dx);
            }
            Op::SigmoidBce { logits, labels } => {
                let n = T::of(labels.len() as f64);
                let dx = v(*logits)
                    .iter()
                    .zip(labels)
                    .map(|(&z, &y)| (sigmoid(z) - y) * gd[0] / n)
                    .collect();
                acc(grads, *logits, dx);
            }
            Op::L2NormalizeRows { x, norms } => {
                let c = node.value.cols();
                let y = node.value.data();
                let mut dx = vec![T::zero(); gd.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let (yr, gr) = (&y[r * c..(r + 1) * c], &gd[r * c..(r + 1) * c]);
                    let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    for j in 0..c {
                        dx[r * c + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Concat { parts } => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p].value.cols();
                    if self.rg(p) {
                        let dp = gd
                            .chunks(total)
                            .flat_map(|row| row[off..off + w].iter().copied())
                            .collect();
                        acc(grads, p, dp);
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let c = nodes[*x].value.cols();
                let w = node.value.cols();
                let mut dx = vec![T::zero(); nodes[*x].value.len()];
                for (drow, grow) in dx.chunks_mut(c).zip(gd.chunks(w)) {
                    drow[*start..start + w].copy_from_slice(grow);
                }
                acc(grads, *x, dx);
            }
            Op::Gather { x, idx } => {
                let mut dx = vec![T::zero(); nodes[*x].value.len()];
                for (&i, &d) in idx.iter().zip(gd) {
                    dx[i] += d;
                }
                acc(grads, *x, dx);
            }
            Op::PairwiseSqDist { x } => {
                let t = &nodes[*x].value;
                let (n, c) = (t.rows(), t.cols());
                let xd = t.data();
                let two = T::of(2.0);
                let mut dx = vec![T::zero(); n * c];
                for i in 0..n {
                    for j in 0..n {
                        let w = (gd[i * n + j] + gd[j * n + i]) * two;
                        if w == T::zero() || i == j {
                            continue;
                        }
                        for k in 0..c {
                            dx[i * c + k] += w * (xd[i * c + k] - xd[j * c + k]);
                        }
                    }
                }
                acc(grads, *x, dx);
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Squared distances accumulated in coordinate order.
pub fn pairwise_sq_dist<T: Real>(x: &[T], n: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = T::zero();
            for k in 0..c {
                let d = x[i * c + k] - x[j * c + k];
                s += d * d;
            }
            out[i * n + j] = s;
        }
    }
    out
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow, patch) = (g.out_h(), g.out_w(), g.patch());
    let mut cols = vec![T::zero(); g.out_rows() * patch];
    let c = g.in_c;
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * patch;
                for ky in 0..g.k_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.k_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let src = ((b * g.in_h + iy as usize) * g.in_w + ix as usize) * c;
                        let dst = row + (ky * g.k_w + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow, patch) = (g.out_h(), g.out_w(), g.patch());
    let c = g.in_c;
    let mut x = vec![T::zero(); g.batch * g.in_h * g.in_w * c];
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * patch;
                for ky in 0..g.k_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.k_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let dst = ((b * g.in_h + iy as usize) * g.in_w + ix as usize) * c;
                        let src = row + (ky * g.k_w + kx) * c;
                        for j in 0..c {
                            x[dst + j] += cols[src + j];
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v)
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t(&[1, 2], &[3.0, 4.0]));
        let y = tape.l2_normalize_rows(x).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn conv_of_constant_image_with_averaging_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::full(&[1, 5, 5, 1], 0.7));
        let w = tape.input(Tensor::full(&[3, 3, 1, 1], 1.0 / 9.0));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 3, 1]);
        for &v in tape.value(y).data() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(Tensor::zeros(&[2, 3]));
        let b = tape.input(Tensor::zeros(&[2, 4]));
        match tape.add(a, b) {
            Err(Error::Shape { op, lhs, rhs }) => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 4]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nan_reports_provenance() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t(&[1], &[-1.0]));
        let err = tape.map(x, |v| v.sqrt(), |v| 0.5 / v.sqrt()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "map", .. }));
    }

    #[test]
    fn quadratic_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", t(&[2], &[1.0, 2.0]), false);
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let sq = tape.mul(w, w).unwrap();
        let out = tape.sum(sq).unwrap();
        let g = tape.backward(out, &store).unwrap();
        assert_eq!(g.get(id).data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_output_has_zero_gradients() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", t(&[2], &[1.0, 2.0]), false);
        let mut tape = Tape::new();
        let _w = tape.param(&store, id);
        let c = tape.input(Tensor::scalar(3.0));
        let g = tape.backward(c, &store).unwrap();
        assert_eq!(g.get(id).data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_ce_gradient_at_uniform_logits() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("z", t(&[1, 2], &[0.0, 0.0]), false);
        let mut tape = Tape::new();
        let z = tape.param(&store, id);
        let l = tape.softmax_cross_entropy(z, &[0]).unwrap();
        let g = tape.backward(l, &store).unwrap();
        assert_eq!(g.get(id).data(), &[-0.5, 0.5]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", t(&[2], &[1.0, 2.0]), false);
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        assert!(matches!(tape.backward(w, &store), Err(Error::NonScalar(_))));
        let s = tape.sum(w).unwrap();
        tape.backward(s, &store).unwrap();
        assert!(matches!(tape.backward(s, &store), Err(Error::TapeConsumed)));
    }

    #[test]
    fn backward_is_linear_in_the_output() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", t(&[3], &[0.3, -1.2, 0.8]), false);
        let build = |tape: &mut Tape<f64>, which: u8| {
            let w = tape.param(&store, id);
            let a = tape.tanh(w).unwrap();
            let a = tape.sum(a).unwrap();
            let b = tape.mul(w, w).unwrap();
            let b = tape.sigmoid(b).unwrap();
            let b = tape.sum(b).unwrap();
            match which {
                0 => a,
                1 => b,
                _ => tape.add(a, b).unwrap(),
            }
        };
        let grads: Vec<Vec<f64>> = (0..3)
            .map(|k| {
                let mut tape = Tape::new();
                let out = build(&mut tape, k);
                tape.backward(out, &store).unwrap().get(id).data().to_vec()
            })
            .collect();
        for j in 0..3 {
            assert!((grads[0][j] + grads[1][j] - grads[2][j]).abs() < 1e-14);
        }
    }

    #[test]
    fn weight_standardize_examples() {
        let mut tape = Tape::<f64>::new();
        // kernel [2 rows, 1 output channel]: filter [1, 3]
        let w = tape.input(t(&[2, 1], &[1.0, 3.0]));
        let y = tape.weight_standardize(w, 1e-5).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-5 && (d[1] - 1.0).abs() < 1e-5);

        let c = tape.input(Tensor::full(&[3, 3, 2, 4], 5.0));
        let y = tape.weight_standardize(c, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }
}
