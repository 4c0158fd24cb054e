//! Dataset files: a JSON manifest plus one headerless little-endian `f32`
//! signal file per subject, channel-major.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use fbssvep_core::types::{validate_recording, Recording, StimulusTable, Trial};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{io, json, Error, Result};

pub const MANIFEST_SCHEMA: &str = "fbssvep-manifest/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    /// Signal file, relative to the manifest's directory.
    pub file: String,
    pub n_samples: usize,
    pub trials: Vec<Trial>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: String,
    pub name: String,
    pub fs: f64,
    pub channels: Vec<String>,
    pub stimuli: StimulusTable,
    pub subjects: Vec<SubjectEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub name: String,
    pub table: StimulusTable,
    pub recordings: Vec<Recording>,
}

impl LoadedDataset {
    pub fn subject_ids(&self) -> Vec<String> {
        self.recordings.iter().map(|r| r.subject_id.clone()).collect()
    }
}

pub fn encode_signal(data: &[Vec<f64>]) -> Vec<u8> {
    data.iter().flatten().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

pub fn decode_signal(bytes: &[u8], channels: usize, samples: usize) -> Vec<Vec<f64>> {
    let values: Vec<f64> =
        bytes.chunks_exact(4).map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))).collect();
    values.chunks(samples.max(1)).take(channels).map(<[f64]>::to_vec).collect()
}

/// Rounds every sample to `f32`, which is what a save/load cycle yields.
pub fn quantize(rec: &Recording) -> Recording {
    let data = rec.data.iter().map(|c| c.iter().map(|&v| f64::from(v as f32)).collect()).collect();
    Recording { data, ..rec.clone() }
}

/// Writes `recordings` under `dir` and returns the manifest path. Every
/// recording must share the sampling rate and channel names.
pub fn save_dataset(dir: &Path, name: &str, table: &StimulusTable, recordings: &[Recording]) -> Result<PathBuf> {
    let first = recordings
        .first()
        .ok_or_else(|| Error::Validation { path: dir.to_path_buf(), detail: "no recordings to write".into() })?;
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut subjects = Vec::with_capacity(recordings.len());
    for rec in recordings {
        if rec.fs != first.fs || rec.channels != first.channels {
            return Err(Error::Validation {
                path: dir.to_path_buf(),
                detail: format!("subject {} differs from {} in rate or channels", rec.subject_id, first.subject_id),
            });
        }
        check_recording(dir, rec, table)?;
        let file = format!("{}.f32", rec.subject_id);
        let path = dir.join(&file);
        fs::write(&path, encode_signal(&rec.data)).map_err(io(&path))?;
        subjects.push(SubjectEntry {
            id: rec.subject_id.clone(),
            file,
            n_samples: rec.n_samples(),
            trials: rec.trials.clone(),
        });
    }
    let manifest = DatasetManifest {
        schema: MANIFEST_SCHEMA.into(),
        name: name.into(),
        fs: first.fs,
        channels: first.channels.clone(),
        stimuli: table.clone(),
        subjects,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).map_err(json(&path))?;
    text.push('\n');
    fs::write(&path, text).map_err(io(&path))?;
    Ok(path)
}

/// Parses and validates a manifest without touching the signal files.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(json(path))?;
    let schema = value.get("schema").and_then(serde_json::Value::as_str).unwrap_or("");
    if schema != MANIFEST_SCHEMA {
        return Err(Error::Version { path: path.into(), found: schema.into(), expected: MANIFEST_SCHEMA.into() });
    }
    let manifest: DatasetManifest = serde_json::from_value(value).map_err(json(path))?;
    let invalid = |detail: String| Error::Validation { path: path.into(), detail };
    manifest.stimuli.check().map_err(|e| invalid(e.to_string()))?;
    if manifest.channels.is_empty() {
        return Err(invalid("no channels".into()));
    }
    if !(manifest.fs > 0.0) {
        return Err(invalid(format!("sampling rate {} is not positive", manifest.fs)));
    }
    let mut seen = HashSet::new();
    for s in &manifest.subjects {
        if !seen.insert(s.id.as_str()) {
            return Err(invalid(format!("subject {} is listed more than once", s.id)));
        }
    }
    Ok(manifest)
}

/// Loads every subject of the manifest at `path`, in manifest order.
pub fn load_dataset(path: &Path) -> Result<LoadedDataset> {
    let manifest = read_manifest(path)?;
    let root = path.parent().unwrap_or_else(|| Path::new("."));
    let recordings =
        manifest.subjects.par_iter().map(|s| load_subject(root, &manifest, s)).collect::<Result<Vec<_>>>()?;
    Ok(LoadedDataset { name: manifest.name, table: manifest.stimuli, recordings })
}

fn load_subject(root: &Path, manifest: &DatasetManifest, entry: &SubjectEntry) -> Result<Recording> {
    let path = root.join(&entry.file);
    let bytes = fs::read(&path).map_err(io(&path))?;
    let channels = manifest.channels.len();
    let expected = 4 * (channels * entry.n_samples) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::SignalSize {
            subject: entry.id.clone(),
            path,
            found: bytes.len() as u64,
            expected,
            channels,
            samples: entry.n_samples,
        });
    }
    let rec = Recording {
        subject_id: entry.id.clone(),
        fs: manifest.fs,
        channels: manifest.channels.clone(),
        data: decode_signal(&bytes, channels, entry.n_samples),
        trials: entry.trials.clone(),
    };
    check_recording(&path, &rec, &manifest.stimuli)?;
    Ok(rec)
}

fn check_recording(path: &Path, rec: &Recording, table: &StimulusTable) -> Result<()> {
    let violations = validate_recording(rec, table);
    if violations.is_empty() {
        return Ok(());
    }
    Err(Error::Validation { path: path.into(), detail: format!("subject {}: {violations:?}", rec.subject_id) })
}
