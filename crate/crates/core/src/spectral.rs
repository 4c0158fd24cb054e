//! Discrete Fourier transforms and the feature layouts the classifiers consume.
//!
//! All spectra come from 125-sample windows at 250 Hz, so bin `k` sits at
//! `2k` Hz. Features keep bins `k = 1..=45` (2 to 90 Hz); the DC bin is dropped.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::types::{SubBandStack, Window, WINDOW_LEN};

/// Bins kept in every feature: 2..90 Hz.
pub const N_BINS: usize = 45;
/// One-sided bin count of a 125-point transform.
pub const ONE_SIDED: usize = WINDOW_LEN / 2 + 1;
/// Zero padding applied at each end before framing the short-time transform.
pub const STFT_PAD: usize = 62;
pub const STFT_HOP: usize = 62;
pub const STFT_FRAMES: usize = 3;
/// Sub-bands feeding the network inputs.
pub const N_BANDS: usize = 10;
/// Floor applied to magnitudes before taking logarithms.
pub const DB_FLOOR: f64 = 1e-12;

/// Mixed-radix decimation-in-time FFT plan for a fixed length.
#[derive(Debug, Clone)]
pub struct Fft {
    n: usize,
    factors: Vec<usize>,
    twiddles: Vec<Complex64>,
}

impl Fft {
    pub fn new(n: usize) -> Self {
        assert!(n > 0, "transform length must be positive");
        let mut factors = Vec::new();
        let mut rest = n;
        let mut p = 2;
        while rest > 1 {
            if p * p > rest {
                factors.push(rest);
                break;
            }
            while rest % p == 0 {
                factors.push(p);
                rest /= p;
            }
            p += 1;
        }
        let twiddles = (0..n).map(|j| Complex64::from_polar(1.0, -2.0 * PI * j as f64 / n as f64)).collect();
        Fft { n, factors, twiddles }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Full two-sided transform `X[k] = sum_t x[t] exp(-2 pi i k t / n)`.
    pub fn transform(&self, input: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(input.len(), self.n, "input length must match the plan");
        let mut out = vec![Complex64::new(0.0, 0.0); self.n];
        let mut scratch = Vec::new();
        self.step(input, 1, &mut out, &self.factors, &mut scratch);
        out
    }

    /// Transform of a real signal.
    pub fn transform_real(&self, input: &[f64]) -> Vec<Complex64> {
        let c: Vec<Complex64> = input.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&c)
    }

    fn step(
        &self,
        x: &[Complex64],
        stride: usize,
        out: &mut [Complex64],
        factors: &[usize],
        scratch: &mut Vec<Complex64>,
    ) {
        let n = out.len();
        if n == 1 {
            out[0] = x[0];
            return;
        }
        let p = factors[0];
        let m = n / p;
        for r in 0..p {
            self.step(&x[r * stride..], stride * p, &mut out[r * m..(r + 1) * m], &factors[1..], scratch);
        }
        let span = self.n / n;
        let radix_span = self.n / p;
        scratch.clear();
        scratch.resize(p, Complex64::new(0.0, 0.0));
        for k in 0..m {
            for r in 0..p {
                scratch[r] = out[r * m + k] * self.twiddles[(r * k * span) % self.n];
            }
            for q in 0..p {
                let mut acc = scratch[0];
                for (r, v) in scratch.iter().enumerate().skip(1) {
                    acc += v * self.twiddles[((r * q) % p) * radix_span];
                }
                out[q * m + k] = acc;
            }
        }
    }
}

fn check_window(x: &[f64]) -> Result<()> {
    if x.len() != WINDOW_LEN {
        bail!(Shape, "expected a {WINDOW_LEN}-sample window, got {}", x.len());
    }
    Ok(())
}

/// Reusable transform plans for 125-sample windows.
#[derive(Debug, Clone)]
pub struct SpectralPlan {
    fft: Fft,
}

impl Default for SpectralPlan {
    fn default() -> Self {
        SpectralPlan { fft: Fft::new(WINDOW_LEN) }
    }
}

impl SpectralPlan {
    /// One-sided spectrum, bins 0..=62 (0..124 Hz).
    pub fn dft(&self, x: &[f64]) -> Result<Vec<Complex64>> {
        check_window(x)?;
        let mut full = self.fft.transform_real(x);
        full.truncate(ONE_SIDED);
        Ok(full)
    }

    /// Bins 1..=45 of the window's spectrum.
    pub fn spectrum_2to90(&self, x: &[f64]) -> Result<ComplexSpectrum> {
        let full = self.dft(x)?;
        Ok(ComplexSpectrum { bins: full[1..=N_BINS].to_vec() })
    }

    /// Short-time transform with a rectangular 125-sample window and hop 62;
    /// returns `[bin][frame]`, 45 x 3.
    pub fn stft(&self, x: &[f64]) -> Result<Vec<[Complex64; STFT_FRAMES]>> {
        check_window(x)?;
        let mut padded = vec![0.0; WINDOW_LEN + 2 * STFT_PAD];
        padded[STFT_PAD..STFT_PAD + WINDOW_LEN].copy_from_slice(x);
        let mut out = vec![[Complex64::new(0.0, 0.0); STFT_FRAMES]; N_BINS];
        for frame in 0..STFT_FRAMES {
            let start = frame * STFT_HOP;
            let spec = self.fft.transform_real(&padded[start..start + WINDOW_LEN]);
            for (bin, row) in out.iter_mut().enumerate() {
                row[frame] = spec[bin + 1];
            }
        }
        Ok(out)
    }

    /// 20 x 45 matrix: row `2i` holds Re and row `2i + 1` holds Im of band `i`'s spectrum.
    pub fn complex_spectrum_matrix(&self, stack: &SubBandStack) -> Result<ComplexSpectrumMatrix> {
        check_bands(stack)?;
        let mut values = Vec::with_capacity(2 * N_BANDS * N_BINS);
        for band in &stack.bands {
            let spec = self.spectrum_2to90(band)?;
            values.extend(spec.bins.iter().map(|c| c.re));
            values.extend(spec.bins.iter().map(|c| c.im));
        }
        Ok(ComplexSpectrumMatrix { values })
    }

    /// 45 x 6 matrix with Re and Im of each frame interleaved along time.
    pub fn complex_spectrogram_single(&self, x: &[f64]) -> Result<Spectrogram> {
        let st = self.stft(x)?;
        let mut values = Vec::with_capacity(N_BINS * 2 * STFT_FRAMES);
        for row in &st {
            for c in row {
                values.push(c.re);
                values.push(c.im);
            }
        }
        Ok(Spectrogram { values })
    }

    /// 10 x 45 x 6 tensor: one interleaved spectrogram per sub-band.
    pub fn complex_spectrogram_tensor(&self, stack: &SubBandStack) -> Result<ComplexSpectrogramTensor> {
        check_bands(stack)?;
        let mut values = Vec::with_capacity(N_BANDS * N_BINS * 2 * STFT_FRAMES);
        for band in &stack.bands {
            values.extend(self.complex_spectrogram_single(band)?.values);
        }
        Ok(ComplexSpectrogramTensor { values })
    }

    /// `20 log10(max(|X_k|, 1e-12))` for bins 2..90 Hz.
    pub fn magnitude_db(&self, x: &[f64]) -> Result<MagnitudeFeatures> {
        let spec = self.spectrum_2to90(x)?;
        let values = spec.bins.iter().map(|c| 20.0 * libm::log10(c.norm().max(DB_FLOOR))).collect();
        Ok(MagnitudeFeatures { values })
    }
}

fn check_bands(stack: &SubBandStack) -> Result<()> {
    if stack.n_bands() != N_BANDS {
        bail!(Shape, "expected {N_BANDS} sub-bands, got {}", stack.n_bands());
    }
    Ok(())
}

/// One-sided 125-point DFT (bins 0..=62).
pub fn dft(x: &[f64]) -> Result<Vec<Complex64>> {
    SpectralPlan::default().dft(x)
}

pub fn spectrum_2to90(w: &Window) -> Result<ComplexSpectrum> {
    SpectralPlan::default().spectrum_2to90(&w.samples)
}

pub fn stft(x: &[f64]) -> Result<Vec<[Complex64; STFT_FRAMES]>> {
    SpectralPlan::default().stft(x)
}

pub fn complex_spectrum_matrix(stack: &SubBandStack) -> Result<ComplexSpectrumMatrix> {
    SpectralPlan::default().complex_spectrum_matrix(stack)
}

pub fn complex_spectrogram_tensor(stack: &SubBandStack) -> Result<ComplexSpectrogramTensor> {
    SpectralPlan::default().complex_spectrogram_tensor(stack)
}

pub fn complex_spectrogram_single(w: &Window) -> Result<Spectrogram> {
    SpectralPlan::default().complex_spectrogram_single(&w.samples)
}

pub fn magnitude_db(w: &Window) -> Result<MagnitudeFeatures> {
    SpectralPlan::default().magnitude_db(&w.samples)
}

/// 45 complex bins covering 2..90 Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    pub bins: Vec<Complex64>,
}

/// Row-major 20 x 45.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrumMatrix {
    pub values: Vec<f64>,
}

impl ComplexSpectrumMatrix {
    pub const SHAPE: [usize; 2] = [2 * N_BANDS, N_BINS];

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * N_BINS + col]
    }
}

/// Row-major 10 x 45 x 6 (sub-band, frequency, interleaved time).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogramTensor {
    pub values: Vec<f64>,
}

impl ComplexSpectrogramTensor {
    pub const SHAPE: [usize; 3] = [N_BANDS, N_BINS, 2 * STFT_FRAMES];

    pub fn get(&self, band: usize, bin: usize, col: usize) -> f64 {
        self.values[(band * N_BINS + bin) * 2 * STFT_FRAMES + col]
    }
}

/// Row-major 45 x 6 spectrogram of an un-banked window.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Vec<f64>,
}

impl Spectrogram {
    pub const SHAPE: [usize; 2] = [N_BINS, 2 * STFT_FRAMES];
}

/// 45 decibel magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeFeatures {
    pub values: Vec<f64>,
}

/// Scalar mean and standard deviation over every element of a training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    /// Population statistics of `values`.
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            bail!(Empty, "cannot fit normalization statistics on no data");
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let stats = NormStats { mean, std: libm::sqrt(var) };
        stats.check()?;
        Ok(stats)
    }

    fn check(&self) -> Result<()> {
        if !(self.std > 0.0) || !self.std.is_finite() {
            bail!(Degenerate, "normalization std must be positive, got {}", self.std);
        }
        Ok(())
    }

    pub fn apply_in_place(&self, values: &mut [f64]) -> Result<()> {
        self.check()?;
        for v in values {
            *v = (*v - self.mean) / self.std;
        }
        Ok(())
    }
}

/// `(x - mean) / std` elementwise.
pub fn normalize(values: &[f64], stats: NormStats) -> Result<Vec<f64>> {
    let mut out = values.to_vec();
    stats.apply_in_place(&mut out)?;
    Ok(out)
}
