//! Layer specifications and a sequential model that owns their parameters.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::seed::Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// 1-, 2- or 3-d convolution; the rank is `kernel.len()`.
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: Vec<usize>,
        stride: Vec<usize>,
        pad: Vec<usize>,
    },
    BatchNorm {
        channels: usize,
        momentum: f64,
        eps: f64,
    },
    Relu,
    LeakyRelu {
        slope: f64,
    },
    MaxPool {
        kernel: Vec<usize>,
    },
    Dropout {
        p: f64,
    },
    /// `[C, L] -> [L, C]`: channels become per-step features.
    ToSequence,
    /// Two-bias LSTM over a `[L, F]` sequence, returning every hidden state.
    Lstm {
        input: usize,
        hidden: usize,
    },
    Flatten,
    Linear {
        input: usize,
        output: usize,
    },
}

impl LayerSpec {
    pub fn conv(in_ch: usize, out_ch: usize, kernel: &[usize], stride: &[usize], pad: &[usize]) -> Self {
        LayerSpec::Conv { in_ch, out_ch, kernel: kernel.to_vec(), stride: stride.to_vec(), pad: pad.to_vec() }
    }

    pub fn batchnorm(channels: usize) -> Self {
        LayerSpec::BatchNorm { channels, momentum: BN_MOMENTUM, eps: BN_EPS }
    }

    pub fn maxpool(kernel: &[usize]) -> Self {
        LayerSpec::MaxPool { kernel: kernel.to_vec() }
    }

    /// Shapes of the learnable tensors, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            LayerSpec::Conv { in_ch, out_ch, kernel, .. } => {
                let mut w = vec![*out_ch, *in_ch];
                w.extend_from_slice(kernel);
                vec![w, vec![*out_ch]]
            }
            LayerSpec::BatchNorm { channels, .. } => vec![vec![*channels], vec![*channels]],
            LayerSpec::Lstm { input, hidden } => {
                let g = 4 * hidden;
                vec![vec![g, *input], vec![g, *hidden], vec![g], vec![g]]
            }
            LayerSpec::Linear { input, output } => vec![vec![*output, *input], vec![*output]],
            _ => Vec::new(),
        }
    }

    /// Shapes of the non-learnable state (batch-norm running statistics).
    pub fn buffer_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            LayerSpec::BatchNorm { channels, .. } => vec![vec![*channels], vec![*channels]],
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Output shape (without batch) for an input shape (without batch).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = || format!("{self:?} cannot take input {input:?}");
        match self {
            LayerSpec::Conv { in_ch, out_ch, kernel, stride, pad } => {
                let k = kernel.len();
                if input.len() != k + 1 || input[0] != *in_ch || stride.len() != k || pad.len() != k {
                    bail!(Shape, "{}", bad());
                }
                let mut out = vec![*out_ch];
                for d in 0..k {
                    let span = input[d + 1] + 2 * pad[d];
                    if span < kernel[d] || stride[d] == 0 {
                        bail!(Shape, "{}", bad());
                    }
                    out.push((span - kernel[d]) / stride[d] + 1);
                }
                Ok(out)
            }
            LayerSpec::BatchNorm { channels, .. } => {
                if input.first() != Some(channels) {
                    bail!(Shape, "{}", bad());
                }
                Ok(input.to_vec())
            }
            LayerSpec::MaxPool { kernel } => {
                if input.len() != kernel.len() + 1 || input[1..].iter().zip(kernel).any(|(i, k)| i < k || *k == 0) {
                    bail!(Shape, "{}", bad());
                }
                let mut out = vec![input[0]];
                out.extend(input[1..].iter().zip(kernel).map(|(i, k)| i / k));
                Ok(out)
            }
            LayerSpec::Relu | LayerSpec::LeakyRelu { .. } | LayerSpec::Dropout { .. } => Ok(input.to_vec()),
            LayerSpec::ToSequence => {
                if input.len() != 2 {
                    bail!(Shape, "{}", bad());
                }
                Ok(vec![input[1], input[0]])
            }
            LayerSpec::Lstm { input: f, hidden } => {
                if input.len() != 2 || input[1] != *f {
                    bail!(Shape, "{}", bad());
                }
                Ok(vec![input[0], *hidden])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Linear { input: i, output } => {
                if input != [*i] {
                    bail!(Shape, "{}", bad());
                }
                Ok(vec![*output])
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    /// Binary hinge on a single output score.
    Hinge,
    MultiHinge,
}

/// Per-forward state: mode, dropout randomness, and the parameter leaves.
pub struct Forward<'a> {
    pub mode: Mode,
    pub rng: Option<&'a mut Rng>,
    pub params: Vec<Var>,
    /// `(buffer index, batch mean, unbiased batch variance)` for each train-mode batch norm.
    pub bn_updates: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

impl<'a> Forward<'a> {
    pub fn eval() -> Self {
        Forward { mode: Mode::Eval, rng: None, params: Vec::new(), bn_updates: Vec::new() }
    }

    pub fn train(rng: &'a mut Rng) -> Self {
        Forward { mode: Mode::Train, rng: Some(rng), params: Vec::new(), bn_updates: Vec::new() }
    }
}

/// A stack of layers with their parameters and running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub layers: Vec<LayerSpec>,
    /// Per-sample input shape.
    pub input_shape: Vec<usize>,
    pub loss: LossKind,
    pub params: Vec<Tensor>,
    pub buffers: Vec<Tensor>,
}

impl Model {
    /// Builds the model with seeded fan-in uniform initialisation.
    pub fn new(layers: Vec<LayerSpec>, input_shape: &[usize], loss: LossKind, seed: u64) -> Result<Self> {
        let mut rng = crate::seed::rng(seed);
        let mut shape = input_shape.to_vec();
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        for layer in &layers {
            shape = layer.output_shape(&shape)?;
            match layer {
                LayerSpec::Dropout { p } if !(0.0..1.0).contains(p) => {
                    bail!(Parameter, "dropout p must be in [0, 1), got {p}")
                }
                LayerSpec::LeakyRelu { slope } if !slope.is_finite() => bail!(Parameter, "leaky slope must be finite"),
                _ => {}
            }
            let bound = match layer {
                LayerSpec::Conv { in_ch, kernel, .. } => {
                    1.0 / libm::sqrt((in_ch * kernel.iter().product::<usize>()) as f64)
                }
                LayerSpec::Linear { input, .. } => 1.0 / libm::sqrt(*input as f64),
                LayerSpec::Lstm { hidden, .. } => 1.0 / libm::sqrt(*hidden as f64),
                _ => 0.0,
            };
            for (k, s) in layer.param_shapes().iter().enumerate() {
                let t = match layer {
                    LayerSpec::BatchNorm { .. } => Tensor::full(s, if k == 0 { 1.0 } else { 0.0 }),
                    _ => {
                        let n = s.iter().product();
                        Tensor { shape: s.clone(), data: (0..n).map(|_| rng.random_range(-bound..=bound)).collect() }
                    }
                };
                params.push(t);
            }
            for (k, s) in layer.buffer_shapes().iter().enumerate() {
                buffers.push(Tensor::full(s, if k == 0 { 0.0 } else { 1.0 }));
            }
        }
        Ok(Model { layers, input_shape: input_shape.to_vec(), loss, params, buffers })
    }

    /// Number of learnable scalars; running statistics are excluded.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Per-layer output shapes (without batch).
    pub fn shape_trace(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            shape = l.output_shape(&shape)?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn output_len(&self) -> Result<usize> {
        Ok(self.shape_trace()?.last().map_or_else(|| self.input_shape.iter().product(), |s| s.iter().product()))
    }

    /// Runs the layers on `x: [N, input_shape..]`.
    pub fn forward(&self, g: &mut Graph, x: Var, fwd: &mut Forward<'_>) -> Result<Var> {
        let xs = g.shape(x);
        if xs.len() != self.input_shape.len() + 1 || xs[1..] != self.input_shape[..] {
            bail!(Shape, "model expects [N, {:?}], got {:?}", self.input_shape, xs);
        }
        fwd.params = self.params.iter().map(|p| g.param(p.clone())).collect();
        let (mut pi, mut bi) = (0, 0);
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                LayerSpec::Conv { stride, pad, .. } => g.conv(h, fwd.params[pi], fwd.params[pi + 1], stride, pad)?,
                LayerSpec::BatchNorm { eps, .. } => {
                    let (gamma, beta) = (fwd.params[pi], fwd.params[pi + 1]);
                    match fwd.mode {
                        Mode::Train => {
                            let (out, stats) = g.batchnorm_train(h, gamma, beta, *eps)?;
                            fwd.bn_updates.push((bi, stats.mean, stats.var_unbiased));
                            out
                        }
                        Mode::Eval => {
                            g.batchnorm_eval(h, gamma, beta, &self.buffers[bi].data, &self.buffers[bi + 1].data, *eps)?
                        }
                    }
                }
                LayerSpec::Relu => g.relu(h),
                LayerSpec::LeakyRelu { slope } => g.leaky_relu(h, *slope),
                LayerSpec::MaxPool { kernel } => g.maxpool(h, kernel)?,
                LayerSpec::Dropout { p } => match (fwd.mode, fwd.rng.as_deref_mut()) {
                    (Mode::Train, Some(rng)) if *p > 0.0 => {
                        let keep = 1.0 / (1.0 - p);
                        let mask = (0..g.value(h).numel())
                            .map(|_| if rng.random::<f64>() < *p { 0.0 } else { keep })
                            .collect();
                        g.scale(h, mask)?
                    }
                    (Mode::Train, None) if *p > 0.0 => bail!(Precondition, "train-mode dropout needs a random source"),
                    _ => h,
                },
                LayerSpec::ToSequence => g.swap_last(h)?,
                LayerSpec::Lstm { hidden, .. } => {
                    let p = &fwd.params[pi..pi + 4];
                    lstm(g, h, *hidden, [p[0], p[1], p[2], p[3]])?
                }
                LayerSpec::Flatten => {
                    let n = g.shape(h)[0];
                    let len = g.value(h).row_len();
                    g.reshape(h, &[n, len])?
                }
                LayerSpec::Linear { .. } => g.linear(h, fwd.params[pi], fwd.params[pi + 1])?,
            };
            pi += layer.param_shapes().len();
            bi += layer.buffer_shapes().len();
        }
        Ok(h)
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[(usize, Vec<f64>, Vec<f64>)]) {
        let mut bi = 0;
        let mut momenta = Vec::new();
        for l in &self.layers {
            if let LayerSpec::BatchNorm { momentum, .. } = l {
                momenta.push((bi, *momentum));
            }
            bi += l.buffer_shapes().len();
        }
        for (at, mean, var) in updates {
            let m = momenta.iter().find(|(b, _)| b == at).map_or(BN_MOMENTUM, |(_, m)| *m);
            for (r, v) in self.buffers[*at].data.iter_mut().zip(mean) {
                *r = (1.0 - m) * *r + m * v;
            }
            for (r, v) in self.buffers[*at + 1].data.iter_mut().zip(var) {
                *r = (1.0 - m) * *r + m * v;
            }
        }
    }

    /// Eval-mode outputs `[N, out]` for a batch of samples, in chunks of `chunk`.
    pub fn predict_scores(&self, x: &Tensor, chunk: usize) -> Result<Vec<Vec<f64>>> {
        let n = x.batch();
        let row = x.row_len();
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let mut shape = x.shape.clone();
            shape[0] = end - start;
            let part = Tensor::new(&shape, x.data[start * row..end * row].to_vec())?;
            let mut g = Graph::new();
            let xv = g.input(part);
            let y = self.forward(&mut g, xv, &mut Forward::eval())?;
            let yv = g.value(y);
            let width = yv.row_len();
            out.extend(yv.data.chunks(width).map(<[f64]>::to_vec));
            start = end;
        }
        Ok(out)
    }

    /// Predicted class per sample: sign of the score for the binary hinge model, else argmax.
    pub fn predict(&self, x: &Tensor, chunk: usize) -> Result<Vec<usize>> {
        let scores = self.predict_scores(x, chunk)?;
        Ok(scores.iter().map(|s| self.decide(s)).collect())
    }

    pub fn decide(&self, scores: &[f64]) -> usize {
        if scores.len() == 1 {
            usize::from(scores[0] > 0.0)
        } else {
            crate::fbcca::argmax_first(scores)
        }
    }

    /// Scalar training loss on a graph output.
    pub fn loss(&self, g: &mut Graph, out: Var, targets: &[usize]) -> Result<Var> {
        match self.loss {
            LossKind::CrossEntropy => g.cross_entropy(out, targets),
            LossKind::Hinge => g.hinge(out, targets),
            LossKind::MultiHinge => g.multi_hinge(out, targets),
        }
    }

    /// Describes the layer stack, one line per layer with its output shape.
    pub fn summary(&self) -> Result<String> {
        let mut s = format!("input {:?}\n", self.input_shape);
        for (l, shape) in self.layers.iter().zip(self.shape_trace()?) {
            s.push_str(&format!("{l:?} -> {shape:?} ({} params)\n", l.param_count()));
        }
        s.push_str(&format!("total {} params\n", self.param_count()));
        Ok(s)
    }
}

/// LSTM over `x: [N, L, F]` with gate order input, forget, cell, output.
/// Returns `[N, L, H]`.
pub fn lstm(g: &mut Graph, x: Var, hidden: usize, [w_ih, w_hh, b_ih, b_hh]: [Var; 4]) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 3 {
        bail!(Shape, "LSTM needs [N, L, F], got {:?}", xs);
    }
    let (n, l) = (xs[0], xs[1]);
    let mut h = g.input(Tensor::zeros(&[n, hidden]));
    let mut c = g.input(Tensor::zeros(&[n, hidden]));
    let mut outs = Vec::with_capacity(l);
    for t in 0..l {
        let xt = g.step(x, t)?;
        let a = g.linear(xt, w_ih, b_ih)?;
        let b = g.linear(h, w_hh, b_hh)?;
        let gates = g.add(a, b)?;
        let i_pre = g.narrow_cols(gates, 0, hidden)?;
        let f_pre = g.narrow_cols(gates, hidden, hidden)?;
        let g_pre = g.narrow_cols(gates, 2 * hidden, hidden)?;
        let o_pre = g.narrow_cols(gates, 3 * hidden, hidden)?;
        let i = g.sigmoid(i_pre);
        let f = g.sigmoid(f_pre);
        let cand = g.tanh(g_pre);
        let o = g.sigmoid(o_pre);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        c = g.add(keep, write)?;
        let tc = g.tanh(c);
        h = g.mul(o, tc)?;
        outs.push(h);
    }
    g.stack(&outs)
}
