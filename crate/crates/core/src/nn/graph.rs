//! Reverse-mode tape. Every op appends a node; `backward` walks the tape in
//! reverse and accumulates gradients into parents that require them.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Error, Result};

use super::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Geometry of an N-d convolution, padded to three spatial dims.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    output: [usize; 3],
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_ch * self.kernel.iter().product::<usize>()
    }

    fn positions(&self) -> usize {
        self.output.iter().product()
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PoolGeom {
    channels: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    MaxPool { x: Var, argmax: Vec<usize> },
    Scale { x: Var, factor: Vec<f64> },
    Relu { x: Var },
    LeakyRelu { x: Var, slope: f64 },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Linear { x: Var, w: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    NarrowCols { x: Var, start: usize },
    Step { x: Var, t: usize },
    Stack { parts: Vec<Var> },
    SwapLast { x: Var },
    Reshape { x: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Hinge { scores: Var, targets: Vec<usize> },
    MultiHinge { scores: Var, targets: Vec<usize> },
    Dot { x: Var, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a train-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (n - 1 denominator), as used for running estimates.
    pub var_unbiased: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn pad3(v: &[usize], fill: usize) -> [usize; 3] {
    let mut out = [fill; 3];
    out[3 - v.len()..].copy_from_slice(v);
    out
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], len: usize, v: Var) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is accumulated for it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that collects a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// N-d cross-correlation with zero padding.
    ///
    /// `x` is `[N, C, s1..sk]`, `w` is `[O, C, k1..kk]`, `b` is `[O]`, `k` in 1..=3.
    pub fn conv(&mut self, x: Var, w: Var, b: Var, stride: &[usize], pad: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let k = xs.len().saturating_sub(2);
        if !(1..=3).contains(&k) || ws.len() != k + 2 || stride.len() != k || pad.len() != k {
            bail!(Shape, "conv rank mismatch: input {:?}, kernel {:?}", xs, ws);
        }
        if ws[1] != xs[1] {
            bail!(Shape, "conv expects {} input channels, got {}", ws[1], xs[1]);
        }
        if self.shape(b) != [ws[0]] {
            bail!(Shape, "conv bias must have {} entries", ws[0]);
        }
        if stride.contains(&0) {
            bail!(Parameter, "conv stride must be positive");
        }
        let (input, kernel) = (pad3(&xs[2..], 1), pad3(&ws[2..], 1));
        let (stride3, pad3_) = (pad3(stride, 1), pad3(pad, 0));
        let mut output = [0; 3];
        for d in 0..3 {
            let span = input[d] + 2 * pad3_[d];
            if span < kernel[d] {
                bail!(Shape, "conv kernel {:?} exceeds padded input {:?}", &ws[2..], &xs[2..]);
            }
            output[d] = (span - kernel[d]) / stride3[d] + 1;
        }
        let geom =
            ConvGeom { batch: xs[0], in_ch: xs[1], out_ch: ws[0], input, kernel, stride: stride3, pad: pad3_, output };
        let cols = im2col(&self.value(x).data, &geom);
        let (np, patch, p) = (geom.batch * geom.positions(), geom.patch(), geom.positions());
        let mut tmp = vec![0.0; geom.out_ch * np];
        gemm(geom.out_ch, patch, np, &self.value(w).data, (patch, 1), &cols, (np, 1), 0.0, &mut tmp);
        let bias = &self.value(b).data;
        let mut out = vec![0.0; tmp.len()];
        for n in 0..geom.batch {
            for o in 0..geom.out_ch {
                let src = &tmp[o * np + n * p..o * np + (n + 1) * p];
                let dst = &mut out[(n * geom.out_ch + o) * p..(n * geom.out_ch + o + 1) * p];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bias[o];
                }
            }
        }
        let mut shape = vec![geom.batch, geom.out_ch];
        shape.extend_from_slice(&output[3 - k..]);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor { shape, data: out }, Op::Conv { x, w, b, geom, cols }, rg))
    }

    /// Per-channel batch normalisation over batch and spatial dims.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, c, s) = self.bn_dims(x, gamma, beta)?;
        if n < 2 {
            bail!(Precondition, "train-mode batch norm needs a batch of at least 2, got {n}");
        }
        let m = (n * s) as f64;
        let xd = &self.value(x).data;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                mean[ci] += xd[(ni * c + ci) * s..(ni * c + ci + 1) * s].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for ni in 0..n {
            for ci in 0..c {
                var[ci] += xd[(ni * c + ci) * s..(ni * c + ci + 1) * s]
                    .iter()
                    .map(|v| (v - mean[ci]) * (v - mean[ci]))
                    .sum::<f64>();
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / m).collect();
        let unbiased: Vec<f64> = var.iter().map(|v| v / (m - 1.0)).collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, &inv_std, true, (n, c, s));
        Ok((out, BatchStats { mean, var_unbiased: unbiased }))
    }

    /// Batch normalisation with frozen statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let dims = self.bn_dims(x, gamma, beta)?;
        if mean.len() != dims.1 || var.len() != dims.1 {
            bail!(Shape, "running statistics must have {} channels", dims.1);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        Ok(self.bn_apply(x, gamma, beta, mean, &inv_std, false, dims))
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        if xs.len() < 2 {
            bail!(Shape, "batch norm needs [N, C, ...], got {:?}", xs);
        }
        let (n, c) = (xs[0], xs[1]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            bail!(Shape, "batch norm affine parameters must have {c} entries");
        }
        Ok((n, c, xs[2..].iter().product()))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        train: bool,
        (n, c, s): (usize, usize, usize),
    ) -> Var {
        let xd = &self.value(x).data;
        let (g, bt) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let range = (ni * c + ci) * s..(ni * c + ci + 1) * s;
                for i in range {
                    let h = (xd[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    out[i] = g[ci] * h + bt[ci];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std: inv_std.to_vec(), train };
        self.push(Tensor { shape, data: out }, op, rg)
    }

    /// Non-overlapping max pooling (stride equals kernel, remainders dropped).
    pub fn maxpool(&mut self, x: Var, kernel: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let k = xs.len().saturating_sub(2);
        if !(1..=3).contains(&k) || kernel.len() != k || kernel.contains(&0) {
            bail!(Shape, "maxpool kernel {:?} does not fit input {:?}", kernel, xs);
        }
        let input = pad3(&xs[2..], 1);
        let kernel3 = pad3(kernel, 1);
        let mut output = [0; 3];
        for d in 0..3 {
            if input[d] < kernel3[d] {
                bail!(Shape, "maxpool kernel {:?} exceeds input {:?}", kernel, &xs[2..]);
            }
            output[d] = input[d] / kernel3[d];
        }
        let geom = PoolGeom { channels: xs[0] * xs[1], input, kernel: kernel3, output };
        let xd = &self.value(x).data;
        let (vin, vout) = (input.iter().product::<usize>(), output.iter().product::<usize>());
        let mut out = vec![0.0; geom.channels * vout];
        let mut argmax = vec![0; out.len()];
        for ch in 0..geom.channels {
            let base = ch * vin;
            for z in 0..output[0] {
                for y in 0..output[1] {
                    for xo in 0..output[2] {
                        let mut best = f64::NEG_INFINITY;
                        let mut at = usize::MAX;
                        for a in 0..kernel3[0] {
                            for b in 0..kernel3[1] {
                                for e in 0..kernel3[2] {
                                    let idx = base
                                        + ((z * kernel3[0] + a) * input[1] + y * kernel3[1] + b) * input[2]
                                        + xo * kernel3[2]
                                        + e;
                                    // Strict comparison keeps the first maximum.
                                    if xd[idx] > best || at == usize::MAX {
                                        best = xd[idx];
                                        at = idx;
                                    }
                                }
                            }
                        }
                        let o = ch * vout + (z * output[1] + y) * output[2] + xo;
                        out[o] = best;
                        argmax[o] = at;
                    }
                }
            }
        }
        let mut shape = xs[..2].to_vec();
        shape.extend_from_slice(&output[3 - k..]);
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data: out }, Op::MaxPool { x, argmax }, rg))
    }

    /// Elementwise multiplication by a constant factor (dropout masks).
    pub fn scale(&mut self, x: Var, factor: Vec<f64>) -> Result<Var> {
        if factor.len() != self.value(x).numel() {
            bail!(Shape, "scale factor length {} does not match input", factor.len());
        }
        let data = self.value(x).data.iter().zip(&factor).map(|(a, b)| a * b).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::Scale { x, factor }, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(x).data.iter().map(|v| f(*v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, libm::tanh, Op::Tanh { x })
    }

    /// `x w^T + b` for `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.shape(b) != [ws[0]] {
            bail!(Shape, "linear mismatch: input {:?}, weight {:?}", xs, ws);
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * dout];
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(&self.value(b).data);
        }
        gemm(n, din, dout, &self.value(x).data, (din, 1), &self.value(w).data, (1, din), 1.0, &mut out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor { shape: vec![n, dout], data: out }, Op::Linear { x, w, b }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            bail!(Shape, "elementwise shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b));
        }
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Columns `start..start + len` of a `[N, C]` tensor.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || start + len > xs[1] {
            bail!(Shape, "cannot take columns {start}..{} of {:?}", start + len, xs);
        }
        let (n, c) = (xs[0], xs[1]);
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&src[r * c + start..r * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![n, len], data }, Op::NarrowCols { x, start }, rg))
    }

    /// Time step `t` of a `[N, L, F]` sequence, as `[N, F]`.
    pub fn step(&mut self, x: Var, t: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 || t >= xs[1] {
            bail!(Shape, "cannot take step {t} of {:?}", xs);
        }
        let (n, l, f) = (xs[0], xs[1], xs[2]);
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(n * f);
        for r in 0..n {
            data.extend_from_slice(&src[(r * l + t) * f..(r * l + t + 1) * f]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![n, f], data }, Op::Step { x, t }, rg))
    }

    /// Stacks `[N, F]` steps into a `[N, L, F]` sequence.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Empty, "cannot stack zero steps");
        };
        let fs = self.shape(first).to_vec();
        if fs.len() != 2 || parts.iter().any(|p| self.shape(*p) != fs.as_slice()) {
            bail!(Shape, "stacked steps must share a [N, F] shape");
        }
        let (n, f, l) = (fs[0], fs[1], parts.len());
        let mut data = vec![0.0; n * l * f];
        for (t, p) in parts.iter().enumerate() {
            let src = &self.value(*p).data;
            for r in 0..n {
                data[(r * l + t) * f..(r * l + t + 1) * f].copy_from_slice(&src[r * f..(r + 1) * f]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor { shape: vec![n, l, f], data }, Op::Stack { parts: parts.to_vec() }, rg))
    }

    /// `[N, A, B] -> [N, B, A]`.
    pub fn swap_last(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 {
            bail!(Shape, "swap_last needs a rank-3 tensor, got {:?}", xs);
        }
        let (n, a, b) = (xs[0], xs[1], xs[2]);
        let src = &self.value(x).data;
        let mut data = vec![0.0; src.len()];
        for r in 0..n {
            for i in 0..a {
                for j in 0..b {
                    data[(r * b + j) * a + i] = src[(r * a + i) * b + j];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![n, b, a], data }, Op::SwapLast { x }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            bail!(Shape, "cannot reshape {:?} to {:?}", self.shape(x), shape);
        }
        let data = self.value(x).data.clone();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: shape.to_vec(), data }, Op::Reshape { x }, rg))
    }

    fn check_targets(&self, scores: Var, targets: &[usize], classes: usize) -> Result<(usize, usize)> {
        let s = self.shape(scores);
        if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
            bail!(Shape, "scores {:?} do not match {} targets", s, targets.len());
        }
        if let Some(&t) = targets.iter().find(|t| **t >= classes) {
            return Err(Error::InvalidTarget { target: t, classes });
        }
        Ok((s[0], s[1]))
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let c = self.shape(logits).get(1).copied().unwrap_or(0);
        let (n, c) = self.check_targets(logits, targets, c)?;
        let z = &self.value(logits).data;
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &z[r * c..(r + 1) * c];
            let p = softmax(row);
            loss -= libm::log(p[targets[r]].max(f64::MIN_POSITIVE));
            probs[r * c..(r + 1) * c].copy_from_slice(&p);
        }
        let rg = self.rg(logits);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        Ok(self.push(Tensor::scalar(loss / n as f64), op, rg))
    }

    /// Mean binary hinge `max(0, 1 - y s)` on `[N, 1]` scores; class 1 maps to y = +1.
    pub fn hinge(&mut self, scores: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.check_targets(scores, targets, 2)?;
        if c != 1 {
            bail!(Shape, "binary hinge needs one score per sample, got {c}");
        }
        let s = &self.value(scores).data;
        let loss: f64 = targets.iter().zip(s).map(|(t, v)| (1.0 - sign(*t) * v).max(0.0)).sum();
        let rg = self.rg(scores);
        Ok(self.push(Tensor::scalar(loss / n as f64), Op::Hinge { scores, targets: targets.to_vec() }, rg))
    }

    /// Mean over samples of the mean over `j != y` of `max(0, 1 - s_y + s_j)`.
    pub fn multi_hinge(&mut self, scores: Var, targets: &[usize]) -> Result<Var> {
        let c = self.shape(scores).get(1).copied().unwrap_or(0);
        let (n, c) = self.check_targets(scores, targets, c)?;
        if c < 2 {
            bail!(Shape, "multiclass hinge needs at least two scores");
        }
        let s = &self.value(scores).data;
        let mut loss = 0.0;
        for (r, &y) in targets.iter().enumerate() {
            let row = &s[r * c..(r + 1) * c];
            loss += (0..c).filter(|j| *j != y).map(|j| (1.0 - row[y] + row[j]).max(0.0)).sum::<f64>() / (c - 1) as f64;
        }
        let rg = self.rg(scores);
        Ok(self.push(Tensor::scalar(loss / n as f64), Op::MultiHinge { scores, targets: targets.to_vec() }, rg))
    }

    /// `sum_i w_i x_i` as a scalar.
    pub fn dot(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            bail!(Shape, "dot weights length {} does not match input", weights.len());
        }
        let v = self.value(x).data.iter().zip(&weights).map(|(a, b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(v), Op::Dot { x, weights }, rg))
    }

    /// Back-propagates from the scalar `root`; previous gradients are cleared.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            bail!(Shape, "backward needs a scalar root, got {:?}", self.shape(root));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = self.grads[i].take() else { continue };
            self.backprop(i, &gy);
            self.grads[i] = Some(gy);
        }
        Ok(())
    }

    fn backprop(&mut self, i: usize, gy: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |v: Var| &nodes[v.0].value;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let y = &nodes[i].value.data;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom, cols } => {
                let (np, patch, p) = (geom.batch * geom.positions(), geom.patch(), geom.positions());
                let mut gt = vec![0.0; geom.out_ch * np];
                for n in 0..geom.batch {
                    for o in 0..geom.out_ch {
                        gt[o * np + n * p..o * np + (n + 1) * p]
                            .copy_from_slice(&gy[(n * geom.out_ch + o) * p..(n * geom.out_ch + o + 1) * p]);
                    }
                }
                if rg(*b) {
                    let gb = accumulate(grads, geom.out_ch, *b);
                    for (o, g) in gb.iter_mut().enumerate() {
                        *g += gt[o * np..(o + 1) * np].iter().sum::<f64>();
                    }
                }
                if rg(*w) {
                    let gw = accumulate(grads, geom.out_ch * patch, *w);
                    gemm(geom.out_ch, np, patch, &gt, (np, 1), cols, (1, np), 1.0, gw);
                }
                if rg(*x) {
                    let mut gcols = vec![0.0; patch * np];
                    gemm(patch, geom.out_ch, np, &val(*w).data, (1, patch), &gt, (np, 1), 0.0, &mut gcols);
                    let gx = accumulate(grads, geom.batch * geom.in_ch * geom.in_volume(), *x);
                    col2im(&gcols, geom, gx);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let xs = &val(*x).shape;
                let (n, c) = (xs[0], xs[1]);
                let s: usize = xs[2..].iter().product();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        for k in (ni * c + ci) * s..(ni * c + ci + 1) * s {
                            sum_g[ci] += gy[k];
                            sum_gx[ci] += gy[k] * xhat[k];
                        }
                    }
                }
                if rg(*beta) {
                    let gb = accumulate(grads, c, *beta);
                    gb.iter_mut().zip(&sum_g).for_each(|(a, b)| *a += b);
                }
                if rg(*gamma) {
                    let gg = accumulate(grads, c, *gamma);
                    gg.iter_mut().zip(&sum_gx).for_each(|(a, b)| *a += b);
                }
                if rg(*x) {
                    let gamma_v = &val(*gamma).data;
                    let m = (n * s) as f64;
                    let gx = accumulate(grads, n * c * s, *x);
                    for ni in 0..n {
                        for ci in 0..c {
                            let scale = gamma_v[ci] * inv_std[ci];
                            for k in (ni * c + ci) * s..(ni * c + ci + 1) * s {
                                gx[k] += if *train {
                                    scale * (gy[k] - sum_g[ci] / m - xhat[k] * sum_gx[ci] / m)
                                } else {
                                    scale * gy[k]
                                };
                            }
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                let gx = accumulate(grads, val(*x).numel(), *x);
                for (g, &at) in gy.iter().zip(argmax) {
                    gx[at] += g;
                }
            }
            Op::Scale { x, factor } => {
                let gx = accumulate(grads, factor.len(), *x);
                for ((a, g), f) in gx.iter_mut().zip(gy).zip(factor) {
                    *a += g * f;
                }
            }
            Op::Relu { x } => {
                let xv = &val(*x).data;
                let gx = accumulate(grads, xv.len(), *x);
                for ((a, g), v) in gx.iter_mut().zip(gy).zip(xv) {
                    if *v > 0.0 {
                        *a += g;
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = &val(*x).data;
                let gx = accumulate(grads, xv.len(), *x);
                for ((a, g), v) in gx.iter_mut().zip(gy).zip(xv) {
                    *a += if *v > 0.0 { *g } else { slope * g };
                }
            }
            Op::Sigmoid { x } => {
                let gx = accumulate(grads, y.len(), *x);
                for ((a, g), s) in gx.iter_mut().zip(gy).zip(y) {
                    *a += g * s * (1.0 - s);
                }
            }
            Op::Tanh { x } => {
                let gx = accumulate(grads, y.len(), *x);
                for ((a, g), t) in gx.iter_mut().zip(gy).zip(y) {
                    *a += g * (1.0 - t * t);
                }
            }
            Op::Linear { x, w, b } => {
                let (xs, ws) = (&val(*x).shape, &val(*w).shape);
                let (n, din, dout) = (xs[0], xs[1], ws[0]);
                if rg(*b) {
                    let gb = accumulate(grads, dout, *b);
                    for row in gy.chunks(dout) {
                        gb.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                }
                if rg(*w) {
                    let gw = accumulate(grads, dout * din, *w);
                    gemm(dout, n, din, gy, (1, dout), &val(*x).data, (din, 1), 1.0, gw);
                }
                if rg(*x) {
                    let gx = accumulate(grads, n * din, *x);
                    gemm(n, dout, din, gy, (dout, 1), &val(*w).data, (din, 1), 1.0, gx);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if rg(v) {
                        let gv = accumulate(grads, gy.len(), v);
                        gv.iter_mut().zip(gy).for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::Mul { a, b } => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if rg(v) {
                        let ov = &val(other).data;
                        let gv = accumulate(grads, gy.len(), v);
                        for ((s, g), o) in gv.iter_mut().zip(gy).zip(ov) {
                            *s += g * o;
                        }
                    }
                }
            }
            Op::NarrowCols { x, start } => {
                let xs = &val(*x).shape;
                let (n, c) = (xs[0], xs[1]);
                let len = gy.len() / n.max(1);
                let gx = accumulate(grads, n * c, *x);
                for r in 0..n {
                    for j in 0..len {
                        gx[r * c + start + j] += gy[r * len + j];
                    }
                }
            }
            Op::Step { x, t } => {
                let xs = &val(*x).shape;
                let (n, l, f) = (xs[0], xs[1], xs[2]);
                let gx = accumulate(grads, n * l * f, *x);
                for r in 0..n {
                    for j in 0..f {
                        gx[(r * l + t) * f + j] += gy[r * f + j];
                    }
                }
            }
            Op::Stack { parts } => {
                let l = parts.len();
                let ps = &val(parts[0]).shape;
                let (n, f) = (ps[0], ps[1]);
                for (t, p) in parts.iter().enumerate() {
                    if rg(*p) {
                        let gp = accumulate(grads, n * f, *p);
                        for r in 0..n {
                            for j in 0..f {
                                gp[r * f + j] += gy[(r * l + t) * f + j];
                            }
                        }
                    }
                }
            }
            Op::SwapLast { x } => {
                let xs = &val(*x).shape;
                let (n, a, b) = (xs[0], xs[1], xs[2]);
                let gx = accumulate(grads, n * a * b, *x);
                for r in 0..n {
                    for i2 in 0..a {
                        for j in 0..b {
                            gx[(r * a + i2) * b + j] += gy[(r * b + j) * a + i2];
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                let gx = accumulate(grads, gy.len(), *x);
                gx.iter_mut().zip(gy).for_each(|(a, g)| *a += g);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = targets.len();
                let c = probs.len() / n;
                let scale = gy[0] / n as f64;
                let gl = accumulate(grads, n * c, *logits);
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                    }
                }
            }
            Op::Hinge { scores, targets } => {
                let s = &val(*scores).data;
                let scale = gy[0] / targets.len() as f64;
                let gs = accumulate(grads, s.len(), *scores);
                for ((g, t), v) in gs.iter_mut().zip(targets).zip(s) {
                    if 1.0 - sign(*t) * v > 0.0 {
                        *g -= scale * sign(*t);
                    }
                }
            }
            Op::MultiHinge { scores, targets } => {
                let s = &val(*scores).data;
                let n = targets.len();
                let c = s.len() / n;
                let scale = gy[0] / (n * (c - 1)) as f64;
                let gs = accumulate(grads, s.len(), *scores);
                for (r, &t) in targets.iter().enumerate() {
                    for j in (0..c).filter(|j| *j != t) {
                        if 1.0 - s[r * c + t] + s[r * c + j] > 0.0 {
                            gs[r * c + j] += scale;
                            gs[r * c + t] -= scale;
                        }
                    }
                }
            }
            Op::Dot { x, weights } => {
                let gx = accumulate(grads, weights.len(), *x);
                gx.iter_mut().zip(weights).for_each(|(a, w)| *a += gy[0] * w);
            }
        }
    }
}

fn sign(target: usize) -> f64 {
    if target == 1 {
        1.0
    } else {
        -1.0
    }
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| libm::exp(v - m)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Unfolds `x` into a `[C*K, N*P]` patch matrix.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (p, np) = (g.positions(), g.batch * g.positions());
    let mut cols = vec![0.0; g.patch() * np];
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let mut r = 0;
    for c in 0..g.in_ch {
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let row = &mut cols[r * np..(r + 1) * np];
                    for n in 0..g.batch {
                        let src = &x[(n * g.in_ch + c) * id * ih * iw..(n * g.in_ch + c + 1) * id * ih * iw];
                        for z in 0..od {
                            let iz = (z * g.stride[0] + a) as isize - g.pad[0] as isize;
                            if iz < 0 || iz >= id as isize {
                                continue;
                            }
                            for yy in 0..oh {
                                let iy = (yy * g.stride[1] + b) as isize - g.pad[1] as isize;
                                if iy < 0 || iy >= ih as isize {
                                    continue;
                                }
                                let base = (iz as usize * ih + iy as usize) * iw;
                                let dst = n * p + (z * oh + yy) * ow;
                                for xo in 0..ow {
                                    let ix = (xo * g.stride[2] + e) as isize - g.pad[2] as isize;
                                    if ix >= 0 && ix < iw as isize {
                                        row[dst + xo] = src[base + ix as usize];
                                    }
                                }
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`], accumulating into `gx`.
fn col2im(cols: &[f64], g: &ConvGeom, gx: &mut [f64]) {
    let (p, np) = (g.positions(), g.batch * g.positions());
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let mut r = 0;
    for c in 0..g.in_ch {
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let row = &cols[r * np..(r + 1) * np];
                    for n in 0..g.batch {
                        let off = (n * g.in_ch + c) * id * ih * iw;
                        for z in 0..od {
                            let iz = (z * g.stride[0] + a) as isize - g.pad[0] as isize;
                            if iz < 0 || iz >= id as isize {
                                continue;
                            }
                            for yy in 0..oh {
                                let iy = (yy * g.stride[1] + b) as isize - g.pad[1] as isize;
                                if iy < 0 || iy >= ih as isize {
                                    continue;
                                }
                                let base = off + (iz as usize * ih + iy as usize) * iw;
                                let src = n * p + (z * oh + yy) * ow;
                                for xo in 0..ow {
                                    let ix = (xo * g.stride[2] + e) as isize - g.pad[2] as isize;
                                    if ix >= 0 && ix < iw as isize {
                                        gx[base + ix as usize] += row[src + xo];
                                    }
                                }
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}
