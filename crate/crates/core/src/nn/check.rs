//! Central finite-difference gradient checks.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::seed;

use super::graph::{Graph, Var};
use super::layers::{Forward, Mode, Model};
use super::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-3;
/// Agreement below which no second difference is taken.
const KINK_SCREEN: f64 = 1e-6;
const NOISE_ULPS: f64 = 64.0;
/// Gradients below this magnitude are compared absolutely.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// `(tensor, element)` of the worst match.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Magnitude below which errors are measured absolutely.
    pub floor: f64,
    /// Elements whose step straddled a kink and was refined.
    pub kinks: usize,
}

impl GradCheck {
    fn new(floor: f64) -> Self {
        GradCheck { max_rel_err: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, checked: 0, floor, kinks: 0 }
    }

    fn record(&mut self, at: (usize, usize), analytic: f64, numeric: f64) {
        let err = rel_err_floor(analytic, numeric, self.floor);
        if err > self.max_rel_err || self.checked == 0 {
            *self = GradCheck { max_rel_err: err, worst: at, analytic, numeric, ..*self };
        }
        self.checked += 1;
    }

    fn observe(&mut self, at: (usize, usize), analytic: f64, (numeric, kinked): (f64, bool)) {
        self.kinks += usize::from(kinked);
        self.record(at, analytic, numeric);
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    rel_err_floor(a, n, REL_FLOOR)
}

pub fn rel_err_floor(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Checks every element of every input of the scalar function `f`.
pub fn grad_check(inputs: &[Tensor], eps: f64, f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<GradCheck> {
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data[0])
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        bail!(Shape, "gradient check needs a scalar function");
    }
    g.backward(out)?;
    let mut report = GradCheck::new(REL_FLOOR);
    let mut work = inputs.to_vec();
    for (ti, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = g.grad(*v).map_or_else(|| alloc::vec![0.0; inputs[ti].numel()], <[f64]>::to_vec);
        for k in 0..inputs[ti].numel() {
            let orig = work[ti].data[k];
            work[ti].data[k] = orig + eps;
            let up = eval(&work)?;
            work[ti].data[k] = orig - eps;
            let down = eval(&work)?;
            work[ti].data[k] = orig;
            report.record((ti, k), analytic[k], (up - down) / (2.0 * eps));
        }
    }
    Ok(report)
}

/// Settings for [`check_model`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelCheck {
    pub mode: Mode,
    pub eps: f64,
    /// Magnitude below which errors are measured absolutely.
    pub floor: f64,
    /// Dropout stream seed, reused on every evaluation so the mask is fixed.
    pub seed: u64,
    /// Every `input_stride`-th input element is checked; parameters are all checked.
    pub input_stride: usize,
}

impl Default for ModelCheck {
    fn default() -> Self {
        ModelCheck { mode: Mode::Train, eps: DEFAULT_EPS, floor: REL_FLOOR, seed: 0, input_stride: 1 }
    }
}

/// Checks the model's training loss against its parameters and input.
pub fn check_model(model: &Model, x: &Tensor, targets: &[usize], opts: &ModelCheck) -> Result<GradCheck> {
    let ModelCheck { mode, eps, floor, seed, input_stride } = *opts;
    if input_stride == 0 {
        bail!(Parameter, "input stride must be positive");
    }
    let loss_of = |m: &Model, input: &Tensor| -> Result<(Graph, Var, Var, Vec<Var>)> {
        let mut g = Graph::new();
        let xv = g.param(input.clone());
        let mut rng = seed::rng(seed);
        let mut fwd = match mode {
            Mode::Train => Forward::train(&mut rng),
            Mode::Eval => Forward::eval(),
        };
        let out = m.forward(&mut g, xv, &mut fwd)?;
        let loss = m.loss(&mut g, out, targets)?;
        let params = core::mem::take(&mut fwd.params);
        Ok((g, loss, xv, params))
    };
    let value = |m: &Model, input: &Tensor| -> Result<f64> {
        let (g, loss, _, _) = loss_of(m, input)?;
        Ok(g.value(loss).data[0])
    };
    let (mut g, loss, xv, params) = loss_of(model, x)?;
    g.backward(loss)?;
    let mut report = GradCheck::new(floor);
    let mut work = model.clone();
    for (pi, v) in params.iter().enumerate() {
        let analytic: Vec<f64> = g.grad(*v).map_or_else(|| alloc::vec![0.0; model.params[pi].numel()], <[f64]>::to_vec);
        for (k, &a) in analytic.iter().enumerate() {
            let orig = work.params[pi].data[k];
            let numeric = probe(a, eps, floor, |h| {
                work.params[pi].data[k] = orig + h;
                let out = value(&work, x);
                work.params[pi].data[k] = orig;
                out
            })?;
            report.observe((pi, k), a, numeric);
        }
    }
    let gx: Vec<f64> = g.grad(xv).map_or_else(|| alloc::vec![0.0; x.numel()], <[f64]>::to_vec);
    let mut xw = x.clone();
    for (k, &a) in gx.iter().enumerate().step_by(input_stride) {
        let orig = xw.data[k];
        let numeric = probe(a, eps, floor, |h| {
            xw.data[k] = orig + h;
            let out = value(model, &xw);
            xw.data[k] = orig;
            out
        })?;
        report.observe((params.len(), k), a, numeric);
    }
    Ok(report)
}

/// Central difference at `eps`. When it disagrees with `analytic`, the four
/// half-step slopes across `[-eps, eps]` are examined: on a smooth function
/// their second differences are O(eps^2), while a kink makes them jump. Only
/// then is the step shrunk by 10 and 100 and the closest estimate kept; the
/// flag reports that a kink was seen.
fn probe(analytic: f64, eps: f64, floor: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<(f64, bool)> {
    let (up, down) = (f(eps)?, f(-eps)?);
    let central = (up - down) / (2.0 * eps);
    if rel_err_floor(analytic, central, floor) < KINK_SCREEN {
        return Ok((central, false));
    }
    let h = eps / 2.0;
    let pts = [down, f(-h)?, f(0.0)?, f(h)?, up];
    let slopes: Vec<f64> = pts.windows(2).map(|w| (w[1] - w[0]) / h).collect();
    let jump = slopes.windows(3).map(|s| (s[2] - 2.0 * s[1] + s[0]).abs()).fold(0.0, f64::max);
    let mismatch = (analytic - central).abs();
    // Below this the slopes are dominated by rounding in the loss itself.
    let noise = NOISE_ULPS * f64::EPSILON * (pts[2].abs() + 1.0) / h;
    if mismatch <= noise || jump <= 0.5 * mismatch {
        return Ok((central, false));
    }
    let mut best = central;
    for step in [eps / 10.0, eps / 100.0] {
        let c = (f(step)? - f(-step)?) / (2.0 * step);
        if (analytic - c).abs() < (analytic - best).abs() {
            best = c;
        }
    }
    Ok((best, true))
}
