//! Domain types shared by every stage: recordings, stimulus tables, windows,
//! and sub-band stacks.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Sampling rate every dataset is resampled to before it reaches this crate.
pub const FS: f64 = 250.0;
/// Analysis window length in seconds.
pub const WINDOW_SECONDS: f64 = 0.5;
/// Window displacement in seconds.
pub const STEP_SECONDS: f64 = 0.1;
/// Samples in one analysis window at [`FS`].
pub const WINDOW_LEN: usize = 125;

/// Number of samples covered by `seconds` at `fs`, rounded to nearest.
pub fn samples_for(seconds: f64, fs: f64) -> usize {
    libm::round(seconds * fs) as usize
}

/// One stimulation target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stimulus {
    pub class_index: usize,
    /// Flicker frequency in Hz.
    pub frequency: f64,
    /// Flicker phase in radians.
    pub phase: f64,
}

/// Ordered map from class index to stimulus frequency and phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusTable {
    pub entries: Vec<Stimulus>,
}

impl StimulusTable {
    /// Builds a table from `(frequency, phase)` pairs, assigning class indices in order.
    pub fn new(pairs: &[(f64, f64)]) -> Result<Self> {
        let entries = pairs
            .iter()
            .enumerate()
            .map(|(class_index, &(frequency, phase))| Stimulus { class_index, frequency, phase })
            .collect();
        let table = StimulusTable { entries };
        table.check()?;
        Ok(table)
    }

    /// Frequencies `start, start + step, ...` (`count` entries) with phases advancing by `phase_step`.
    pub fn evenly_spaced(start: f64, step: f64, count: usize, phase_step: f64) -> Result<Self> {
        let pairs: Vec<(f64, f64)> = (0..count)
            .map(|i| {
                let phase = libm::fmod(i as f64 * phase_step, 2.0 * core::f64::consts::PI);
                (start + step * i as f64, phase)
            })
            .collect();
        Self::new(&pairs)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn frequency(&self, class: usize) -> Option<f64> {
        self.entries.get(class).map(|s| s.frequency)
    }

    pub fn contains(&self, class: usize) -> bool {
        class < self.entries.len()
    }

    /// Checks positivity, distinctness and contiguous class indices.
    pub fn check(&self) -> Result<()> {
        if self.entries.is_empty() {
            bail!(Empty, "stimulus table has no entries");
        }
        for (i, s) in self.entries.iter().enumerate() {
            if s.class_index != i {
                bail!(Config, "class indices must be contiguous from 0; entry {i} has {}", s.class_index);
            }
            if !(s.frequency > 0.0) || !s.frequency.is_finite() {
                bail!(Parameter, "stimulus frequency must be positive, got {}", s.frequency);
            }
            if self.entries[..i].iter().any(|o| o.frequency == s.frequency) {
                bail!(Config, "duplicate stimulus frequency {} Hz", s.frequency);
            }
        }
        Ok(())
    }
}

/// A stimulation epoch inside a recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub start: usize,
    pub length: usize,
    pub label: usize,
}

/// Multi-channel raw EEG from one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub subject_id: String,
    pub fs: f64,
    pub channels: Vec<String>,
    /// Channel-major samples: `data[channel][sample]`.
    pub data: Vec<Vec<f64>>,
    pub trials: Vec<Trial>,
}

impl Recording {
    pub fn n_samples(&self) -> usize {
        self.data.first().map_or(0, Vec::len)
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c == name)
    }
}

/// A broken [`Recording`] invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NonPositiveRate(f64),
    ChannelCountMismatch { names: usize, rows: usize },
    RaggedChannel { channel: usize, len: usize, expected: usize },
    TrialOutOfBounds { trial: usize, end: usize, n_samples: usize },
    UnknownLabel { trial: usize, label: usize },
}

/// Lists every invariant violation of `rec` against `table`; empty means valid.
pub fn validate_recording(rec: &Recording, table: &StimulusTable) -> Vec<Violation> {
    let mut out = Vec::new();
    if !(rec.fs > 0.0) {
        out.push(Violation::NonPositiveRate(rec.fs));
    }
    if rec.channels.len() != rec.data.len() {
        out.push(Violation::ChannelCountMismatch { names: rec.channels.len(), rows: rec.data.len() });
    }
    let n = rec.n_samples();
    for (channel, row) in rec.data.iter().enumerate() {
        if row.len() != n {
            out.push(Violation::RaggedChannel { channel, len: row.len(), expected: n });
        }
    }
    for (i, t) in rec.trials.iter().enumerate() {
        let end = t.start.saturating_add(t.length);
        if t.length == 0 || end > n {
            out.push(Violation::TrialOutOfBounds { trial: i, end, n_samples: n });
        }
        if !table.contains(t.label) {
            out.push(Violation::UnknownLabel { trial: i, label: t.label });
        }
    }
    out
}

/// One single-channel analysis window.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub samples: Vec<f64>,
    pub fs: f64,
    pub label: usize,
}

/// Band-pass filtered versions of one window, ordered by filter index.
#[derive(Debug, Clone, PartialEq)]
pub struct SubBandStack {
    pub bands: Vec<Vec<f64>>,
    pub fs: f64,
    pub label: usize,
}

impl SubBandStack {
    pub fn n_bands(&self) -> usize {
        self.bands.len()
    }

    pub fn len(&self) -> usize {
        self.bands.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn one_channel(n: usize, trials: Vec<Trial>) -> Recording {
        Recording { subject_id: "S01".into(), fs: FS, channels: vec!["Oz".into()], data: vec![vec![0.0; n]], trials }
    }

    fn table() -> StimulusTable {
        StimulusTable::new(&[(12.0, 0.0), (15.0, 0.0)]).unwrap()
    }

    #[test]
    fn well_formed_recording_has_no_violations() {
        let rec = one_channel(
            2500,
            vec![Trial { start: 0, length: 1250, label: 0 }, Trial { start: 1250, length: 1250, label: 1 }],
        );
        assert!(validate_recording(&rec, &table()).is_empty());
    }

    #[test]
    fn trial_past_end_is_reported() {
        let rec = one_channel(1000, vec![Trial { start: 0, length: 1250, label: 0 }]);
        let v = validate_recording(&rec, &table());
        assert_eq!(v, vec![Violation::TrialOutOfBounds { trial: 0, end: 1250, n_samples: 1000 }]);
    }

    #[test]
    fn unknown_label_is_reported() {
        let rec = one_channel(1250, vec![Trial { start: 0, length: 1250, label: 99 }]);
        let v = validate_recording(&rec, &table());
        assert_eq!(v, vec![Violation::UnknownLabel { trial: 0, label: 99 }]);
    }

    #[test]
    fn window_length_follows_rate() {
        assert_eq!(samples_for(WINDOW_SECONDS, FS), WINDOW_LEN);
        assert_eq!(samples_for(STEP_SECONDS, FS), 25);
    }

    #[test]
    fn table_rejects_duplicates_and_nonpositive() {
        assert!(StimulusTable::new(&[(12.0, 0.0), (12.0, 1.0)]).is_err());
        assert!(StimulusTable::new(&[(0.0, 0.0)]).is_err());
        let portable = StimulusTable::evenly_spaced(9.25, 0.5, 12, core::f64::consts::FRAC_PI_2).unwrap();
        assert_eq!(portable.frequency(11), Some(14.75));
    }
}
