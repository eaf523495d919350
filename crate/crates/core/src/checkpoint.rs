//! Single-file checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (configs, tensor names and lengths), then every value as
//! little-endian `f64`: model tensors, `beta`, `gamma`, and optionally the
//! optimizer moments.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::PreprocessConfig;
use crate::loss::LossState;
use crate::model::{ModelConfig, ModelError, PoseNet};
use crate::nn::Params;
use crate::optim::{Adam, AdamConfig};
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"POSEREG\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint file")]
    NotACheckpoint { path: PathBuf },
    #[error("{path}: checkpoint format version {found} is incompatible with version {expected}")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: corrupt checkpoint: {msg}")]
    Corrupt { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Model { path: PathBuf, source: ModelError },
}

/// All learnable state plus the configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: PoseNet,
    pub loss_state: LossState,
    pub train_config: TrainConfig,
    pub preprocess: PreprocessConfig,
    pub epochs_done: usize,
    pub optimizer: Option<Adam>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
    shapes: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    preprocess: PreprocessConfig,
    epochs_done: usize,
    tensors: Vec<(String, usize)>,
    optimizer: Option<OptimizerHeader>,
}

fn push_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let named = ckpt.model.named_params();
    let header = Header {
        model: ckpt.model.config().clone(),
        train: ckpt.train_config.clone(),
        preprocess: ckpt.preprocess.clone(),
        epochs_done: ckpt.epochs_done,
        tensors: named.iter().map(|(n, s)| (n.clone(), s.len())).collect(),
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerHeader {
            config: o.config,
            step: o.step,
            shapes: o.shapes(),
        }),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, s) in &named {
        push_f64s(&mut buf, s);
    }
    push_f64s(&mut buf, &[ckpt.loss_state.beta, ckpt.loss_state.gamma]);
    if let Some(o) = &ckpt.optimizer {
        for t in o.m.iter().chain(&o.v) {
            push_f64s(&mut buf, t);
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Corrupt {
                path: self.path.to_owned(),
                msg: format!("truncated: needed {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| self.corrupt("tensor too large"))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn corrupt(&self, msg: &str) -> CheckpointError {
        CheckpointError::Corrupt {
            path: self.path.to_owned(),
            msg: msg.to_string(),
        }
    }
}

/// Decodes a checkpoint; `path` is only used in error messages.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::NotACheckpoint {
            path: path.to_owned(),
        });
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
        path,
    };
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            path: path.to_owned(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(|_| r.corrupt("header too large"))?;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| r.corrupt(&format!("bad header: {e}")))?;

    let model_err = |source| CheckpointError::Model {
        path: path.to_owned(),
        source,
    };
    let mut model = PoseNet::new(header.model.clone(), 0).map_err(model_err)?;
    {
        let expected: Vec<(String, usize)> = model
            .named_params()
            .iter()
            .map(|(n, s)| (n.clone(), s.len()))
            .collect();
        if expected != header.tensors {
            return Err(r.corrupt("tensor layout does not match the model configuration"));
        }
    }
    for dst in model.params_mut() {
        let values = r.f64s(dst.len())?;
        dst.copy_from_slice(&values);
    }
    let w = r.f64s(2)?;
    let loss_state = LossState::new(w[0], w[1]);
    let optimizer = match header.optimizer {
        None => None,
        Some(h) => {
            let mut m = Vec::with_capacity(h.shapes.len());
            for &n in &h.shapes {
                m.push(r.f64s(n)?);
            }
            let mut v = Vec::with_capacity(h.shapes.len());
            for &n in &h.shapes {
                v.push(r.f64s(n)?);
            }
            Some(Adam {
                config: h.config,
                step: h.step,
                m,
                v,
            })
        }
    };
    if r.pos != bytes.len() {
        return Err(r.corrupt(&format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        model,
        loss_state,
        train_config: header.train,
        preprocess: header.preprocess,
        epochs_done: header.epochs_done,
        optimizer,
    })
}

/// Writes atomically via a sibling temporary file.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.to_owned(),
        source,
    };
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&encode_checkpoint(ckpt)).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_owned(),
        source,
    })?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CropMode;
    use crate::metrics::evaluate;
    use crate::model::{Backbone, EncoderConfig};
    use crate::synthetic::generate_synthetic_scene;
    use crate::train::{train, Trainer};

    fn small() -> Checkpoint {
        let model = PoseNet::new(
            ModelConfig {
                encoder: EncoderConfig {
                    backbone: Backbone::TinyResidual,
                    feature_dim: 16,
                    pretrained: false,
                    dropout_rate: 0.5,
                },
                attention: true,
                attention_ratio: 8,
                input_size: 32,
            },
            1,
        )
        .unwrap();
        let prep = PreprocessConfig {
            rescale_short_side: 32,
            crop: 32,
            crop_mode: CropMode::Center,
            jitter: None,
        };
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 3,
            epochs: 1,
            seed: 9,
            ..TrainConfig::default()
        };
        let data = generate_synthetic_scene(5, 0);
        train(model, &data, cfg, prep).unwrap().checkpoint
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ckpt = small();
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(encode_checkpoint(&back), fs::read(&path).unwrap());
        assert!(!path.with_extension("partial").exists());

        let data = generate_synthetic_scene(4, 3);
        let a = evaluate(&ckpt.model, &data, &ckpt.preprocess).unwrap();
        let b = evaluate(&back.model, &data, &back.preprocess).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn without_optimizer_state() {
        let mut ckpt = small();
        ckpt.optimizer = None;
        let back = decode_checkpoint(&encode_checkpoint(&ckpt), Path::new("x")).unwrap();
        assert_eq!(back, ckpt);
        let t = Trainer::from_checkpoint(back).unwrap();
        assert_eq!(t.optimizer.step, 0);
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = encode_checkpoint(&small());
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let err = decode_checkpoint(&bytes, Path::new("old.ckpt")).unwrap_err();
        assert!(matches!(
            err,
            CheckpointError::Version {
                found: 7,
                expected: 1,
                ..
            }
        ));
        assert!(err.to_string().contains("old.ckpt"));
    }

    #[test]
    fn truncation_and_garbage_are_corruption() {
        let bytes = encode_checkpoint(&small());
        for cut in [13, 30, bytes.len() / 2, bytes.len() - 1] {
            let err = decode_checkpoint(&bytes[..cut], Path::new("t")).unwrap_err();
            assert!(
                matches!(err, CheckpointError::Corrupt { .. }),
                "cut {cut}: {err}"
            );
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            decode_checkpoint(&extra, Path::new("t")),
            Err(CheckpointError::Corrupt { .. })
        ));
        assert!(matches!(
            decode_checkpoint(b"hello world", Path::new("t")),
            Err(CheckpointError::NotACheckpoint { .. })
        ));
    }
}
