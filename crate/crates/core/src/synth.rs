//! Synthetic SSVEP recordings with known labels.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::seed::{self, Rng};
use crate::types::{Recording, StimulusTable, Trial, FS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub table: StimulusTable,
    pub n_harmonics: usize,
    /// Harmonic amplitudes fall as `h^-gamma`.
    pub gamma: f64,
    pub white_sigma: f64,
    pub pink_sigma: f64,
    /// Per-subject gain is drawn uniformly from this range.
    pub gain_range: (f64, f64),
    /// Per-subject response latency in seconds, drawn uniformly from this range.
    pub latency_range: (f64, f64),
    /// Standard deviation of the per-trial phase jitter in radians.
    pub trial_jitter: f64,
    pub fs: f64,
    pub trial_seconds: f64,
    /// Noise-only gap before, between and after trials.
    pub rest_seconds: f64,
    pub n_channels: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(table: StimulusTable, seed: u64) -> Self {
        SynthConfig {
            table,
            n_harmonics: 5,
            gamma: 1.0,
            white_sigma: 1.0,
            pink_sigma: 0.5,
            gain_range: (0.6, 1.4),
            latency_range: (0.05, 0.15),
            trial_jitter: 0.2,
            fs: FS,
            trial_seconds: 2.0,
            rest_seconds: 0.5,
            n_channels: 1,
            seed,
        }
    }

    /// Noise-free variant: no noise, unit gain, no latency or jitter.
    pub fn clean(table: StimulusTable, seed: u64) -> Self {
        SynthConfig {
            white_sigma: 0.0,
            pink_sigma: 0.0,
            gain_range: (1.0, 1.0),
            latency_range: (0.0, 0.0),
            trial_jitter: 0.0,
            ..SynthConfig::new(table, seed)
        }
    }

    pub fn check(&self) -> Result<()> {
        self.table.check()?;
        if !(self.fs > 0.0) || !(self.trial_seconds > 0.0) || self.rest_seconds < 0.0 {
            bail!(Config, "sampling rate and trial length must be positive");
        }
        if let Some(e) = self.table.entries.iter().find(|e| e.frequency >= self.fs / 2.0) {
            bail!(Config, "stimulus {} Hz is not below Nyquist", e.frequency);
        }
        if !(self.white_sigma >= 0.0) || !(self.pink_sigma >= 0.0) || !(self.trial_jitter >= 0.0) {
            bail!(Config, "noise levels must be non-negative");
        }
        if self.gain_range.0 > self.gain_range.1 || self.latency_range.0 > self.latency_range.1 {
            bail!(Config, "ranges must be ordered (low, high)");
        }
        if self.n_channels == 0 || self.n_harmonics == 0 {
            bail!(Config, "need at least one channel and one harmonic");
        }
        Ok(())
    }

    pub fn trial_len(&self) -> usize {
        libm::round(self.trial_seconds * self.fs) as usize
    }

    pub fn rest_len(&self) -> usize {
        libm::round(self.rest_seconds * self.fs) as usize
    }
}

/// Parameters shared by every trial of one subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubjectParams {
    pub gain: f64,
    pub latency: f64,
}

impl SubjectParams {
    pub fn draw(cfg: &SynthConfig, rng: &mut Rng) -> Self {
        let uniform = |rng: &mut Rng, (lo, hi): (f64, f64)| if lo == hi { lo } else { rng.random_range(lo..hi) };
        let gain = uniform(rng, cfg.gain_range);
        let latency = uniform(rng, cfg.latency_range);
        SubjectParams { gain, latency }
    }
}

/// Pink noise by shaping white noise with a 3-pole/3-zero filter (about -10 dB/decade).
#[derive(Debug, Clone)]
pub struct PinkNoise {
    state: [f64; 3],
}

const PINK_B: [f64; 4] = [0.049922035, -0.095993537, 0.050612699, -0.004408786];
const PINK_A: [f64; 4] = [1.0, -2.494956002, 2.017265875, -0.522189400];
/// Standard deviation of the shaping filter's output for unit white input.
const PINK_GAIN: f64 = 0.086_190_152;
const PINK_BURN_IN: usize = 2000;

impl PinkNoise {
    pub fn new(rng: &mut Rng) -> Self {
        let mut p = PinkNoise { state: [0.0; 3] };
        for _ in 0..PINK_BURN_IN {
            p.next_raw(StandardNormal.sample(rng));
        }
        p
    }

    fn next_raw(&mut self, w: f64) -> f64 {
        // Transposed direct form II.
        let y = PINK_B[0] * w + self.state[0];
        self.state[0] = PINK_B[1] * w - PINK_A[1] * y + self.state[1];
        self.state[1] = PINK_B[2] * w - PINK_A[2] * y + self.state[2];
        self.state[2] = PINK_B[3] * w - PINK_A[3] * y;
        y
    }

    /// Next sample, scaled to unit variance.
    pub fn sample(&mut self, rng: &mut Rng) -> f64 {
        self.next_raw(StandardNormal.sample(rng)) / PINK_GAIN
    }
}

/// Noise-free SSVEP response of `len` samples for `class`.
pub fn ssvep_response(cfg: &SynthConfig, class: usize, subject: &SubjectParams, jitter: f64, len: usize) -> Vec<f64> {
    let stim = &cfg.table.entries[class];
    let mut out = vec![0.0; len];
    for h in 1..=cfg.n_harmonics {
        let hf = h as f64 * stim.frequency;
        if hf >= cfg.fs / 2.0 {
            break;
        }
        let amp = subject.gain * libm::pow(h as f64, -cfg.gamma);
        let w = 2.0 * PI * hf / cfg.fs;
        let phase = h as f64 * stim.phase + jitter - 2.0 * PI * hf * subject.latency;
        for (t, o) in out.iter_mut().enumerate() {
            *o += amp * libm::sin(w * t as f64 + phase);
        }
    }
    out
}

fn add_noise(cfg: &SynthConfig, x: &mut [f64], pink: &mut PinkNoise, rng: &mut Rng) {
    if cfg.white_sigma == 0.0 && cfg.pink_sigma == 0.0 {
        return;
    }
    let white = Normal::new(0.0, cfg.white_sigma.max(f64::MIN_POSITIVE)).expect("sigma checked");
    for v in x.iter_mut() {
        let w = if cfg.white_sigma > 0.0 { white.sample(rng) } else { 0.0 };
        let p = if cfg.pink_sigma > 0.0 { cfg.pink_sigma * pink.sample(rng) } else { 0.0 };
        *v += w + p;
    }
}

/// One single-channel trial: SSVEP response plus white and pink noise.
pub fn generate_trial(class: usize, cfg: &SynthConfig, subject: &SubjectParams, rng: &mut Rng) -> Result<Vec<f64>> {
    cfg.check()?;
    if class >= cfg.table.len() {
        return Err(Error::InvalidTarget { target: class, classes: cfg.table.len() });
    }
    let jitter = if cfg.trial_jitter > 0.0 {
        Normal::new(0.0, cfg.trial_jitter).expect("jitter checked").sample(rng)
    } else {
        0.0
    };
    let mut x = ssvep_response(cfg, class, subject, jitter, cfg.trial_len());
    let mut pink = PinkNoise::new(rng);
    add_noise(cfg, &mut x, &mut pink, rng);
    Ok(x)
}

pub fn subject_id(index: usize) -> String {
    format!("S{:02}", index + 1)
}

/// One continuous recording per subject with `trials_per_class` trials of each class
/// in shuffled order, separated by noise-only rests.
pub fn generate_subject(
    index: usize,
    trials_per_class: usize,
    cfg: &SynthConfig,
) -> Result<(Recording, SubjectParams)> {
    cfg.check()?;
    let id = subject_id(index);
    let mut rng = seed::rng(seed::derive(cfg.seed, &id));
    let params = SubjectParams::draw(cfg, &mut rng);
    let mut order: Vec<usize> = (0..cfg.table.len()).flat_map(|c| core::iter::repeat_n(c, trials_per_class)).collect();
    order.shuffle(&mut rng);

    let (trial_len, rest) = (cfg.trial_len(), cfg.rest_len());
    let total = rest + order.len() * (trial_len + rest);
    let mut trials = Vec::with_capacity(order.len());
    let mut clean = vec![0.0; total];
    for (k, &class) in order.iter().enumerate() {
        let start = rest + k * (trial_len + rest);
        let jitter = if cfg.trial_jitter > 0.0 {
            Normal::new(0.0, cfg.trial_jitter).expect("jitter checked").sample(&mut rng)
        } else {
            0.0
        };
        let response = ssvep_response(cfg, class, &params, jitter, trial_len);
        clean[start..start + trial_len].copy_from_slice(&response);
        trials.push(Trial { start, length: trial_len, label: class });
    }
    let mut data = Vec::with_capacity(cfg.n_channels);
    for ch in 0..cfg.n_channels {
        // Extra channels see a weaker copy of the response.
        let weight = 1.0 / (1.0 + ch as f64);
        let mut x: Vec<f64> = clean.iter().map(|v| v * weight).collect();
        let mut pink = PinkNoise::new(&mut rng);
        add_noise(cfg, &mut x, &mut pink, &mut rng);
        data.push(x);
    }
    let channels = (0..cfg.n_channels).map(|c| if c == 0 { String::from("Oz") } else { format!("C{c}") }).collect();
    Ok((Recording { subject_id: id, fs: cfg.fs, channels, data, trials }, params))
}

/// `n_subjects` recordings; subject parameters come from per-subject derived seeds.
pub fn generate_dataset(n_subjects: usize, trials_per_class: usize, cfg: &SynthConfig) -> Result<Vec<Recording>> {
    (0..n_subjects).map(|i| generate_subject(i, trials_per_class, cfg).map(|(r, _)| r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::dft;
    use crate::types::validate_recording;

    fn table() -> StimulusTable {
        StimulusTable::new(&[(12.0, 0.0), (15.0, PI / 2.0)]).unwrap()
    }

    fn rms(x: &[f64]) -> f64 {
        libm::sqrt(x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64)
    }

    #[test]
    fn pink_gain_normalises_variance() {
        let mut rng = seed::rng(3);
        let mut p = PinkNoise::new(&mut rng);
        let x: Vec<f64> = (0..400_000).map(|_| p.sample(&mut rng)).collect();
        assert!((rms(&x) - 1.0).abs() < 0.05, "{}", rms(&x));
    }

    #[test]
    fn clean_trial_energy_sits_on_harmonics() {
        let cfg = SynthConfig::clean(table(), 1);
        let params = SubjectParams { gain: 1.0, latency: 0.0 };
        let x = generate_trial(0, &cfg, &params, &mut seed::rng(0)).unwrap();
        let spec = dft(&x[..125]).unwrap();
        let power: Vec<f64> = spec.iter().map(|c| c.norm_sqr()).collect();
        let total: f64 = power.iter().sum();
        let on: f64 = [6, 12, 18, 24, 30].iter().map(|&k| power[k]).sum();
        assert!(on / total > 0.999, "{}", on / total);
    }

    #[test]
    fn zero_gain_is_noise_only_and_seed_is_deterministic() {
        let mut cfg = SynthConfig::new(table(), 1);
        cfg.gain_range = (0.0, 0.0);
        cfg.pink_sigma = 0.0;
        let params = SubjectParams::draw(&cfg, &mut seed::rng(5));
        assert_eq!(params.gain, 0.0);
        let a = generate_trial(1, &cfg, &params, &mut seed::rng(9)).unwrap();
        let b = generate_trial(1, &cfg, &params, &mut seed::rng(9)).unwrap();
        assert_eq!(a, b);
        let mut rng = seed::rng(9);
        let _jitter: f64 = Normal::new(0.0, cfg.trial_jitter).unwrap().sample(&mut rng);
        let _pink = PinkNoise::new(&mut rng);
        let noise: Vec<f64> = (0..a.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert_eq!(a, noise);
    }

    #[test]
    fn rms_scales_with_gain() {
        let cfg = SynthConfig::clean(table(), 1);
        let one = ssvep_response(&cfg, 1, &SubjectParams { gain: 1.0, latency: 0.0 }, 0.0, 500);
        let three = ssvep_response(&cfg, 1, &SubjectParams { gain: 3.0, latency: 0.0 }, 0.0, 500);
        assert!((rms(&three) / rms(&one) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn dataset_counts_and_subject_variability() {
        let cfg = SynthConfig::new(table(), 11);
        let recs = generate_dataset(20, 6, &cfg).unwrap();
        assert_eq!(recs.len(), 20);
        assert_eq!(recs.iter().map(|r| r.trials.len()).sum::<usize>(), 240);
        for r in &recs {
            assert!(validate_recording(r, &cfg.table).is_empty());
        }
        let g0 = generate_subject(0, 1, &cfg).unwrap().1.gain;
        let g1 = generate_subject(1, 1, &cfg).unwrap().1.gain;
        assert_ne!(g0, g1);
        assert_eq!(recs, generate_dataset(20, 6, &cfg).unwrap());
    }

    #[test]
    fn invalid_class_is_rejected() {
        let cfg = SynthConfig::clean(table(), 1);
        let params = SubjectParams { gain: 1.0, latency: 0.0 };
        assert!(generate_trial(2, &cfg, &params, &mut seed::rng(0)).is_err());
    }
}
