//! Filter bank canonical correlation analysis.
//!
//! Each sub-band of a window is correlated (CCA) with sin/cos references at
//! every candidate frequency and its harmonics; the squared correlations are
//! fused with weights `n^-a + b` that favour low band indices, and the
//! candidate with the largest fused score wins.

use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dsp::FilterBank;
use crate::error::{bail, Result};
use crate::linalg::{largest_singular_value, thin_qr, Mat};
use crate::types::{StimulusTable, SubBandStack};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FbccaConfig {
    pub n_bands: usize,
    pub n_harmonics: usize,
    pub a: f64,
    pub b: f64,
}

impl Default for FbccaConfig {
    fn default() -> Self {
        FbccaConfig { n_bands: 7, n_harmonics: 5, a: 1.25, b: 0.25 }
    }
}

impl FbccaConfig {
    /// Fusion weight of band `n` (1-based).
    pub fn weight(&self, n: usize) -> f64 {
        libm::pow(n as f64, -self.a) + self.b
    }

    pub fn weights(&self) -> Vec<f64> {
        (1..=self.n_bands).map(|n| self.weight(n)).collect()
    }
}

/// Sinusoidal references for one stimulus frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub frequency: f64,
    /// Rows `[sin(2 pi h f t), cos(2 pi h f t)]` for `h = 1..`, each `len` samples.
    pub signals: Vec<Vec<f64>>,
}

/// References at `freq` and its harmonics; harmonics at or above Nyquist are omitted.
pub fn reference_set(freq: f64, n_harmonics: usize, fs: f64, len: usize) -> Result<ReferenceSet> {
    if !(freq > 0.0) {
        bail!(Parameter, "reference frequency must be positive, got {freq}");
    }
    if n_harmonics == 0 || len == 0 {
        bail!(Parameter, "need at least one harmonic and one sample");
    }
    let mut signals = Vec::with_capacity(2 * n_harmonics);
    for h in 1..=n_harmonics {
        let hf = h as f64 * freq;
        if hf >= fs / 2.0 {
            break;
        }
        let w = 2.0 * PI * hf / fs;
        signals.push((0..len).map(|t| libm::sin(w * t as f64)).collect());
        signals.push((0..len).map(|t| libm::cos(w * t as f64)).collect());
    }
    Ok(ReferenceSet { frequency: freq, signals })
}

/// Orthonormal basis of the centered row space of a set of signals.
#[derive(Debug, Clone)]
pub struct CcaBasis {
    q: Mat,
}

impl CcaBasis {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            bail!(Empty, "CCA needs at least one signal row");
        };
        let len = first.len();
        if rows.iter().any(|r| r.len() != len) {
            bail!(Shape, "CCA rows have unequal lengths");
        }
        let mut centered = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            let mean = r.iter().sum::<f64>() / len as f64;
            let c: Vec<f64> = r.iter().map(|v| v - mean).collect();
            let norm = libm::sqrt(c.iter().map(|v| v * v).sum());
            let raw = libm::sqrt(r.iter().map(|v| v * v).sum());
            if !(norm > 1e-12 * raw) || norm == 0.0 || !norm.is_finite() {
                bail!(Degenerate, "signal row {i} has zero variance");
            }
            // Row scaling leaves the spanned subspace unchanged and keeps QR well scaled.
            centered.push(c.into_iter().map(|v| v / norm).collect());
        }
        let (q, diag) = thin_qr(&Mat::from_columns(&centered));
        let top = diag.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        if diag.iter().any(|d| d.abs() <= 1e-10 * top) {
            bail!(Degenerate, "signal rows are linearly dependent");
        }
        Ok(CcaBasis { q })
    }

    pub fn dim(&self) -> usize {
        self.q.cols
    }

    pub fn len(&self) -> usize {
        self.q.rows
    }

    pub fn is_empty(&self) -> bool {
        self.q.rows == 0
    }

    /// Largest canonical correlation between the two subspaces.
    pub fn max_corr(&self, other: &CcaBasis) -> f64 {
        let cross = self.q.t_mul(&other.q);
        largest_singular_value(&cross).clamp(0.0, 1.0)
    }
}

/// Largest canonical correlation between the rows of `x` and the rows of `y`.
pub fn cca_max_corr(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    let len = x.first().map_or(0, Vec::len);
    if y.first().map_or(0, Vec::len) != len {
        bail!(Shape, "CCA inputs must have the same number of samples");
    }
    if len <= x.len() + y.len() {
        bail!(Shape, "CCA needs more samples ({len}) than total rows ({})", x.len() + y.len());
    }
    Ok(CcaBasis::new(x)?.max_corr(&CcaBasis::new(y)?))
}

/// An FBCCA classifier bound to a stimulus table and window length.
#[derive(Debug, Clone)]
pub struct Fbcca {
    cfg: FbccaConfig,
    weights: Vec<f64>,
    references: Vec<CcaBasis>,
    bank: FilterBank,
    fs: f64,
    len: usize,
}

impl Fbcca {
    pub fn new(table: &StimulusTable, cfg: FbccaConfig, fs: f64, len: usize) -> Result<Self> {
        table.check()?;
        let references = table
            .entries
            .iter()
            .map(|s| CcaBasis::new(&reference_set(s.frequency, cfg.n_harmonics, fs, len)?.signals))
            .collect::<Result<Vec<_>>>()?;
        Ok(Fbcca { cfg, weights: cfg.weights(), references, bank: FilterBank::new(cfg.n_bands, fs)?, fs, len })
    }

    pub fn config(&self) -> &FbccaConfig {
        &self.cfg
    }

    /// Fused score per class for already band-filtered signals.
    pub fn scores(&self, bands: &[Vec<f64>]) -> Result<Vec<f64>> {
        if bands.len() != self.cfg.n_bands {
            bail!(Shape, "expected {} sub-bands, got {}", self.cfg.n_bands, bands.len());
        }
        let mut scores = alloc::vec![0.0; self.references.len()];
        for (band, w) in bands.iter().zip(&self.weights) {
            if band.len() != self.len {
                bail!(Shape, "expected {}-sample bands, got {}", self.len, band.len());
            }
            let basis = CcaBasis::new(core::slice::from_ref(band))?;
            for (score, reference) in scores.iter_mut().zip(&self.references) {
                let rho = basis.max_corr(reference);
                *score += w * rho * rho;
            }
        }
        Ok(scores)
    }

    /// Classifies a stack produced by filtering the continuous stream.
    pub fn classify_stack(&self, stack: &SubBandStack) -> Result<usize> {
        Ok(argmax_first(&self.scores(&stack.bands)?))
    }

    /// Classifies a raw window, banking it with the configured filters first.
    pub fn classify_window(&self, x: &[f64]) -> Result<usize> {
        if x.iter().all(|v| *v == 0.0) {
            bail!(Degenerate, "cannot classify an all-zero window");
        }
        let bands = self.bank.apply(x)?;
        Ok(argmax_first(&self.scores(&bands)?))
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }
}

/// Index of the largest value; exact ties go to the lowest index.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// One-shot FBCCA on a raw window.
pub fn fbcca_classify(x: &[f64], table: &StimulusTable, cfg: FbccaConfig, fs: f64) -> Result<usize> {
    Fbcca::new(table, cfg, fs, x.len())?.classify_window(x)
}
