//! Checkpoint container: magic, format version, a JSON header describing the
//! classifier with its tensors emptied, then every tensor element as a
//! little-endian `f64`.

use std::fs;
use std::path::Path;

use fbssvep_core::nn::Tensor;
use fbssvep_core::pipeline::{PreprocessConfig, Trained};
use serde::{Deserialize, Serialize};

use crate::error::{io, json, Error, Result};

pub const MAGIC: &[u8; 8] = b"FBSSVEPK";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub method: String,
    pub test_subject: String,
    pub n_classes: usize,
    pub seed: u64,
    pub preprocess: PreprocessConfig,
    pub trained: Trained,
}

fn tensors_mut(trained: &mut Trained) -> Vec<&mut Tensor> {
    match trained {
        Trained::Net { model, .. } => model.params.iter_mut().chain(model.buffers.iter_mut()).collect(),
        Trained::Forest { .. } => Vec::new(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = self.clone();
        let mut blob = Vec::new();
        for t in tensors_mut(&mut header.trained) {
            blob.extend(t.data.drain(..).flat_map(f64::to_le_bytes));
        }
        let head = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(28 + head.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(head.len() as u64).to_le_bytes());
        out.extend_from_slice(&head);
        out.extend_from_slice(&((blob.len() / 8) as u64).to_le_bytes());
        out.extend_from_slice(&blob);
        out
    }

    /// `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |offset: usize, detail: &str| Error::Format {
            path: path.into(),
            detail: format!("at byte {offset}: {detail}"),
        };
        let mut at = 0usize;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            let end =
                at.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| bad(at, &format!("truncated {what}")))?;
            let s = &bytes[at..end];
            at = end;
            Ok(s)
        };
        if take(8, "magic")? != MAGIC {
            return Err(bad(0, "not a checkpoint file"));
        }
        let version = u32::from_le_bytes(take(4, "version")?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Version {
                path: path.into(),
                found: version.to_string(),
                expected: VERSION.to_string(),
            });
        }
        let head_len = u64::from_le_bytes(take(8, "header length")?.try_into().expect("8 bytes")) as usize;
        let mut ckpt: Checkpoint = serde_json::from_slice(take(head_len, "header")?).map_err(json(path))?;
        let count = u64::from_le_bytes(take(8, "tensor length")?.try_into().expect("8 bytes")) as usize;
        let blob_at = 28 + head_len;
        let blob = take(count.saturating_mul(8), "tensor data")?;
        let mut values = blob.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")));
        let mut used = 0usize;
        for t in tensors_mut(&mut ckpt.trained) {
            let n: usize = t.shape.iter().product();
            if !t.data.is_empty() || used + n > count {
                return Err(bad(blob_at, "tensor data does not match the declared shapes"));
            }
            t.data.extend(values.by_ref().take(n));
            used += n;
        }
        if used != count {
            return Err(bad(blob_at, &format!("{} unused tensor values", count - used)));
        }
        if at != bytes.len() {
            return Err(bad(at, "trailing bytes"));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io(path))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fbssvep_core::forest::{fit_forest, ForestConfig};
    use fbssvep_core::models::ModelKind;
    use fbssvep_core::spectral::NormStats;

    fn net_checkpoint() -> Checkpoint {
        let model = ModelKind::Fbcnn2d.build(2, 9).unwrap();
        Checkpoint {
            method: "FBCNN-2D".into(),
            test_subject: "S04".into(),
            n_classes: 2,
            seed: 11,
            preprocess: PreprocessConfig::default(),
            trained: Trained::Net {
                model_kind: ModelKind::Fbcnn2d,
                model,
                norm: NormStats { mean: 0.1 + 0.2, std: 1.0 / 3.0 },
            },
        }
    }

    #[test]
    fn net_round_trip_is_bit_exact() {
        let c = net_checkpoint();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        let Trained::Net { model, .. } = &back.trained else { unreachable!() };
        let Trained::Net { model: orig, .. } = &c.trained else { unreachable!() };
        for (a, b) in model.params.iter().chain(&model.buffers).zip(orig.params.iter().chain(&orig.buffers)) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn forest_round_trip_is_exact() {
        let xs: Vec<Vec<f64>> = (0..40).map(|i| vec![f64::from(i) / 7.0, (f64::from(i) * 0.37).sin()]).collect();
        let ys: Vec<usize> = (0..40).map(|i| usize::from(i % 3 == 0)).collect();
        let forest =
            fit_forest(&xs, &ys, 2, &ForestConfig { n_trees: 5, max_features: 1, ..ForestConfig::for_classes(2, 1) })
                .unwrap();
        let c = Checkpoint {
            method: "RF".into(),
            test_subject: "S01".into(),
            n_classes: 2,
            seed: 1,
            preprocess: PreprocessConfig::default(),
            trained: Trained::Forest { forest, norm: NormStats { mean: 0.3, std: 0.7 } },
        };
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes(), Path::new("x")).unwrap(), c);
    }

    #[test]
    fn corrupt_files_are_rejected_with_offsets() {
        let bytes = net_checkpoint().to_bytes();
        let p = Path::new("m.ckpt");
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p).unwrap_err();
        assert!(err.to_string().contains("truncated tensor data"), "{err}");
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, p).unwrap_err().to_string().contains("trailing"));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic, p).unwrap_err().to_string().contains("at byte 0"));
        let mut ver = bytes;
        ver[8] = 7;
        assert!(matches!(Checkpoint::from_bytes(&ver, p), Err(Error::Version { .. })));
    }
}
