//! IIR filter design, zero-phase filtering, channel referencing, the
//! harmonic filter bank and window slicing.
//!
//! Band-pass filters are Chebyshev type I designs built in zero/pole/gain
//! form (analog prototype, low-pass to band-pass transform, bilinear
//! transform) and run as cascaded second-order sections.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::types::{samples_for, Recording, SubBandStack, Window};

/// Prototype order of the broadband reference band-pass.
pub const CHEBY_ORDER: usize = 4;
/// Prototype order of the filter-bank designs. Order 4 leaves the wide
/// middle bands short of 20 dB rejection 4 Hz below their low edge.
pub const BANK_ORDER: usize = 5;
/// Passband ripple of every band-pass design, in dB.
pub const CHEBY_RIPPLE_DB: f64 = 0.5;
/// Upper passband edge shared by all filter-bank filters.
pub const BANK_HIGH_HZ: f64 = 90.0;
/// Quality factor of the power-line notch.
pub const NOTCH_Q: f64 = 35.0;
pub const NOTCH_HZ: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterKind {
    ChebyshevIBandpass,
    Notch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignMeta {
    pub kind: FilterKind,
    pub order: usize,
    pub ripple_db: f64,
    pub band_hz: (f64, f64),
}

/// One second-order section; `a[0]` is always 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    /// Initial state giving a steady-state response to a unit step input.
    fn step_state(&self) -> [f64; 2] {
        let gain = (self.b[0] + self.b[1] + self.b[2]) / (self.a[0] + self.a[1] + self.a[2]);
        let z1 = self.b[2] - self.a[2] * gain;
        let z0 = self.b[1] - self.a[1] * gain + z1;
        [z0, z1]
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (self.a[0] + self.a[1] + self.a[2])
    }

    /// Transposed direct form II over `x` in place.
    fn run(&self, x: &mut [f64], mut state: [f64; 2]) {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        for v in x.iter_mut() {
            let input = *v;
            let y = b0 * input + state[0];
            state[0] = b1 * input - a1 * y + state[1];
            state[1] = b2 * input - a2 * y;
            *v = y;
        }
    }
}

/// A designed IIR filter: its transfer-function coefficients and the
/// equivalent second-order-section cascade used for filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct IirFilter {
    /// Feed-forward coefficients, highest power of z^-1 last.
    pub b: Vec<f64>,
    /// Feedback coefficients with `a[0] == 1`.
    pub a: Vec<f64>,
    pub sos: Vec<Biquad>,
    /// Poles in the z-plane.
    pub poles: Vec<Complex64>,
    pub meta: DesignMeta,
}

impl IirFilter {
    fn from_sections(sos: Vec<Biquad>, poles: Vec<Complex64>, meta: DesignMeta) -> Self {
        let mut b = vec![1.0];
        let mut a = vec![1.0];
        for s in &sos {
            b = poly_mul(&b, &s.b);
            a = poly_mul(&a, &s.a);
        }
        IirFilter { b, a, sos, poles, meta }
    }

    /// Complex response at `freq_hz`, evaluated through the section cascade.
    pub fn response(&self, freq_hz: f64, fs: f64) -> Complex64 {
        let w = 2.0 * PI * freq_hz / fs;
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        self.sos.iter().fold(Complex64::new(1.0, 0.0), |acc, s| {
            let num = z2 * s.b[2] + z1 * s.b[1] + s.b[0];
            let den = z2 * s.a[2] + z1 * s.a[1] + s.a[0];
            acc * num / den
        })
    }

    /// Single-pass magnitude response in dB.
    pub fn gain_db(&self, freq_hz: f64, fs: f64) -> f64 {
        20.0 * libm::log10(self.response(freq_hz, fs).norm())
    }

    pub fn is_stable(&self) -> bool {
        self.poles.iter().all(|p| p.norm() < 1.0)
    }

    /// Edge-padding length used by [`filtfilt`].
    pub fn pad_len(&self) -> usize {
        3 * self.a.len().max(self.b.len())
    }

    /// Causal filtering from a zero initial state.
    pub fn lfilter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for s in &self.sos {
            s.run(&mut y, [0.0, 0.0]);
        }
        y
    }

    /// Causal filtering starting from the steady state of a constant input `x0`.
    fn run_steady(&self, x: &mut [f64]) {
        let Some(&x0) = x.first() else { return };
        let mut scale = x0;
        for s in &self.sos {
            let [z0, z1] = s.step_state();
            s.run(x, [z0 * scale, z1 * scale]);
            scale *= s.dc_gain();
        }
    }
}

fn poly_mul(p: &[f64], q: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; p.len() + q.len() - 1];
    for (i, &pi) in p.iter().enumerate() {
        for (j, &qj) in q.iter().enumerate() {
            out[i + j] += pi * qj;
        }
    }
    out
}

fn prewarp(freq_hz: f64, fs: f64) -> f64 {
    2.0 * fs * libm::tan(PI * freq_hz / fs)
}

/// Designs a Chebyshev type I band-pass filter of prototype `order`
/// (the band-pass transfer function has `2 * order` poles).
pub fn design_cheby1(order: usize, ripple_db: f64, band: (f64, f64), fs: f64) -> Result<IirFilter> {
    let (low, high) = band;
    if order == 0 {
        bail!(Design, "order must be at least 1");
    }
    if !(ripple_db > 0.0) {
        bail!(Design, "passband ripple must be positive, got {ripple_db} dB");
    }
    if !(fs > 0.0) {
        bail!(Design, "sampling rate must be positive, got {fs}");
    }
    if !(low > 0.0 && low < high && high < fs / 2.0) {
        bail!(Design, "band edges ({low}, {high}) Hz must satisfy 0 < low < high < {}", fs / 2.0);
    }

    // Analog low-pass prototype with unit cutoff.
    let eps = libm::sqrt(libm::pow(10.0, 0.1 * ripple_db) - 1.0);
    let mu = libm::asinh(1.0 / eps) / order as f64;
    let proto: Vec<Complex64> = (0..order)
        .map(|i| {
            let m = -(order as f64) + 1.0 + 2.0 * i as f64;
            let theta = PI * m / (2.0 * order as f64);
            -Complex64::new(mu, theta).sinh()
        })
        .collect();
    let mut gain = proto.iter().fold(Complex64::new(1.0, 0.0), |acc, p| acc * -p).re;
    if order % 2 == 0 {
        gain /= libm::sqrt(1.0 + eps * eps);
    }

    // Low-pass to band-pass on the prewarped edges.
    let w_low = prewarp(low, fs);
    let w_high = prewarp(high, fs);
    let bw = w_high - w_low;
    let w0 = libm::sqrt(w_low * w_high);
    let mut analog = Vec::with_capacity(2 * order);
    for p in &proto {
        let scaled = *p * (bw / 2.0);
        let root = (scaled * scaled - w0 * w0).sqrt();
        analog.push(scaled + root);
        analog.push(scaled - root);
    }
    gain *= libm::pow(bw, order as f64);
    // `order` analog zeros at s = 0; the rest sit at infinity.

    // Bilinear transform.
    let fs2 = 2.0 * fs;
    let poles: Vec<Complex64> = analog.iter().map(|p| (fs2 + *p) / (fs2 - *p)).collect();
    let den = analog.iter().fold(Complex64::new(1.0, 0.0), |acc, p| acc * (fs2 - *p));
    let num = libm::pow(fs2, order as f64);
    gain *= (Complex64::new(num, 0.0) / den).re;

    let sections = pair_poles(&poles)?;
    let mut sos: Vec<Biquad> = sections.into_iter().map(|a| Biquad { b: [1.0, 0.0, -1.0], a }).collect();
    for v in &mut sos[0].b {
        *v *= gain;
    }
    let meta = DesignMeta { kind: FilterKind::ChebyshevIBandpass, order, ripple_db, band_hz: band };
    let filter = IirFilter::from_sections(sos, poles, meta);
    if !filter.is_stable() {
        bail!(Design, "design produced an unstable filter for band ({low}, {high}) Hz");
    }
    Ok(filter)
}

/// Groups z-plane poles into real second-order denominators.
fn pair_poles(poles: &[Complex64]) -> Result<Vec<[f64; 3]>> {
    const TOL: f64 = 1e-12;
    let mut out = Vec::new();
    let mut reals = Vec::new();
    for p in poles {
        if p.im > TOL {
            out.push([1.0, -2.0 * p.re, p.norm_sqr()]);
        } else if p.im.abs() <= TOL {
            reals.push(p.re);
        }
    }
    if reals.len() % 2 != 0 {
        return Err(Error::Design("odd number of real poles".into()));
    }
    for pair in reals.chunks(2) {
        out.push([1.0, -(pair[0] + pair[1]), pair[0] * pair[1]]);
    }
    if out.len() * 2 != poles.len() {
        return Err(Error::Design("poles do not form conjugate pairs".into()));
    }
    Ok(out)
}

/// Second-order IIR notch at `freq_hz` with quality factor `q`.
pub fn design_notch(freq_hz: f64, q: f64, fs: f64) -> Result<IirFilter> {
    if !(freq_hz > 0.0 && freq_hz < fs / 2.0) || !(q > 0.0) {
        bail!(Design, "notch at {freq_hz} Hz with Q {q} is invalid for fs {fs}");
    }
    let w0 = 2.0 * freq_hz / fs;
    let bw = w0 / q;
    let beta = libm::tan(bw * PI / 2.0);
    let gain = 1.0 / (1.0 + beta);
    let c = libm::cos(PI * w0);
    let b = [gain, -2.0 * gain * c, gain];
    let a = [1.0, -2.0 * gain * c, 2.0 * gain - 1.0];
    let disc = Complex64::new(a[1] * a[1] - 4.0 * a[2], 0.0).sqrt();
    let poles = vec![(-a[1] + disc) / 2.0, (-a[1] - disc) / 2.0];
    let half = freq_hz / q / 2.0;
    let meta =
        DesignMeta { kind: FilterKind::Notch, order: 2, ripple_db: 0.0, band_hz: (freq_hz - half, freq_hz + half) };
    Ok(IirFilter::from_sections(vec![Biquad { b, a }], poles, meta))
}

/// Zero-phase forward-backward filtering.
///
/// The input is extended at both ends by odd reflection of length
/// [`IirFilter::pad_len`], and each pass starts from the steady state of its
/// first sample. The result has the squared magnitude response of `f`.
pub fn filtfilt(f: &IirFilter, x: &[f64]) -> Result<Vec<f64>> {
    let pad = f.pad_len();
    let n = x.len();
    if n <= pad {
        return Err(Error::TooShort { needed: pad, found: n });
    }
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    f.run_steady(&mut ext);
    ext.reverse();
    f.run_steady(&mut ext);
    ext.reverse();
    Ok(ext[pad..pad + n].to_vec())
}

/// Removes 50 Hz line noise with a zero-phase notch.
pub fn notch_50hz(x: &[f64], fs: f64) -> Result<Vec<f64>> {
    if !(fs > 2.0 * NOTCH_HZ) {
        bail!(Parameter, "notch requires fs > 100 Hz, got {fs}");
    }
    let f = design_notch(NOTCH_HZ, NOTCH_Q, fs)?;
    filtfilt(&f, x)
}

/// Zero-phase 2-90 Hz band-pass, the single-channel alternative to CAR.
pub fn bandpass_2_90(x: &[f64], fs: f64) -> Result<Vec<f64>> {
    let f = design_cheby1(CHEBY_ORDER, CHEBY_RIPPLE_DB, (2.0, BANK_HIGH_HZ), fs)?;
    filtfilt(&f, x)
}

/// Common average reference: subtracts the instantaneous cross-channel mean.
pub fn car(rec: &Recording) -> Result<Recording> {
    let n_ch = rec.data.len();
    if n_ch < 2 {
        bail!(Precondition, "CAR needs at least 2 channels, recording has {n_ch}; use the band-pass path");
    }
    let n = rec.n_samples();
    if rec.data.iter().any(|row| row.len() != n) {
        bail!(Shape, "channels have unequal lengths");
    }
    let mut mean = vec![0.0; n];
    for row in &rec.data {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n_ch as f64;
    }
    let data = rec.data.iter().map(|row| row.iter().zip(&mean).map(|(v, m)| v - m).collect()).collect();
    Ok(Recording { data, ..rec.clone() })
}

/// Passband of filter `index` (1-based) in the harmonic filter bank.
pub fn bank_band(index: usize) -> (f64, f64) {
    (6.0 + 8.0 * (index as f64 - 1.0), BANK_HIGH_HZ)
}

/// The harmonic filter bank: every filter shares the 90 Hz upper edge and
/// low edges step by 8 Hz from 6 Hz.
#[derive(Debug, Clone)]
pub struct FilterBank {
    pub filters: Vec<IirFilter>,
}

impl FilterBank {
    /// `n_bands` must be 10 (network inputs) or 7 (FBCCA).
    pub fn new(n_bands: usize, fs: f64) -> Result<Self> {
        if n_bands != 7 && n_bands != 10 {
            bail!(Config, "filter bank supports 7 or 10 bands, got {n_bands}");
        }
        let filters = (1..=n_bands)
            .map(|n| design_cheby1(BANK_ORDER, CHEBY_RIPPLE_DB, bank_band(n), fs))
            .collect::<Result<Vec<_>>>()?;
        Ok(FilterBank { filters })
    }

    pub fn n_bands(&self) -> usize {
        self.filters.len()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.filters.iter().map(|f| filtfilt(f, x)).collect()
    }
}

/// Zero-phase filters `x` through each filter of an `n_bands` bank.
pub fn apply_filter_bank(x: &[f64], fs: f64, n_bands: usize) -> Result<Vec<Vec<f64>>> {
    FilterBank::new(n_bands, fs)?.apply(x)
}

/// Start offsets of every full window that fits in `len` samples.
pub fn window_starts(len: usize, fs: f64, win_s: f64, step_s: f64) -> Result<Vec<usize>> {
    let win = samples_for(win_s, fs);
    let step = samples_for(step_s, fs);
    if win == 0 || step == 0 {
        bail!(Parameter, "window ({win_s} s) and step ({step_s} s) must span at least one sample");
    }
    if len < win {
        bail!(Empty, "signal of {len} samples is shorter than one {win}-sample window");
    }
    Ok((0..=(len - win) / step).map(|i| i * step).collect())
}

/// Overlapping windows of `x`, all tagged with `label`.
pub fn window_slice(x: &[f64], fs: f64, win_s: f64, step_s: f64, label: usize) -> Result<Vec<Window>> {
    let win = samples_for(win_s, fs);
    Ok(window_starts(x.len(), fs, win_s, step_s)?
        .into_iter()
        .map(|s| Window { samples: x[s..s + win].to_vec(), fs, label })
        .collect())
}

/// Slices every band at the same offsets so the stacks stay aligned.
pub fn slice_bands(bands: &[Vec<f64>], fs: f64, win_s: f64, step_s: f64, label: usize) -> Result<Vec<SubBandStack>> {
    let Some(first) = bands.first() else {
        bail!(Empty, "no bands to slice");
    };
    if bands.iter().any(|b| b.len() != first.len()) {
        bail!(Shape, "bands have unequal lengths");
    }
    let win = samples_for(win_s, fs);
    Ok(window_starts(first.len(), fs, win_s, step_s)?
        .into_iter()
        .map(|s| SubBandStack { bands: bands.iter().map(|b| b[s..s + win].to_vec()).collect(), fs, label })
        .collect())
}
