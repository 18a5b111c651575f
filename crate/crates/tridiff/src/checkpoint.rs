//! Binary checkpoint container for denoiser parameters and optimizer state.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! magic   "PDCK" (4 bytes)
//! u16     version = 1
//! u32     JSON header length, then that many bytes of UTF-8 JSON
//! tensor records until EOF:
//!   u16   name length, name bytes
//!   u8    dtype (0 = f32, 1 = f64)
//!   u8    rank
//!   u64   dims...
//!   raw little-endian element data
//! ```
//!
//! The JSON header carries the model config, schedule hyperparameters, the
//! step counter, class names, and the per-class face-count histogram the
//! sampler draws from. Optimizer moments are stored as `opt.m.*` /
//! `opt.v.*` tensor records when present. Reloading reproduces bit-identical
//! forward passes and optimizer state.

use crate::denoiser::{DenoiserConfig, DenoiserParams, ParamMap};
use crate::optim::AdamState;
use crate::schedule::ScheduleConfig;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PDCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint header: {0}")]
    Header(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct HeaderJson {
    config: DenoiserConfig,
    schedule: ScheduleConfig,
    step: u64,
    class_names: Vec<String>,
    /// Per class: (face count, frequency) pairs from the training set.
    face_histograms: Vec<Vec<(u16, u32)>>,
    has_optimizer_state: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserCheckpoint {
    pub params: DenoiserParams,
    pub schedule: ScheduleConfig,
    pub step: u64,
    pub class_names: Vec<String>,
    pub face_histograms: Vec<Vec<(u16, u32)>>,
    pub optimizer_state: Option<AdamState>,
}

impl DenoiserCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = HeaderJson {
            config: self.params.config.clone(),
            schedule: self.schedule.clone(),
            step: self.step,
            class_names: self.class_names.clone(),
            face_histograms: self.face_histograms.clone(),
            has_optimizer_state: self.optimizer_state.is_some(),
        };
        let header_bytes = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for (name, tensor) in self.params.tensors.iter() {
            write_tensor(&mut out, name, tensor);
        }
        if let Some(state) = &self.optimizer_state {
            for (name, tensor) in state.m.iter() {
                write_tensor(&mut out, &format!("opt.m.{name}"), tensor);
            }
            for (name, tensor) in state.v.iter() {
                write_tensor(&mut out, &format!("opt.v.{name}"), tensor);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut offset = 0usize;
        let take = |offset: &mut usize, n: usize, what: &str| -> Result<&[u8], CheckpointError> {
            if *offset + n > bytes.len() {
                return Err(CheckpointError::Format {
                    offset: *offset,
                    message: format!("truncated while reading {what}"),
                });
            }
            let s = &bytes[*offset..*offset + n];
            *offset += n;
            Ok(s)
        };

        let magic = take(&mut offset, 4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Format {
                offset: 0,
                message: format!("bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"),
            });
        }
        let v = take(&mut offset, 2, "version")?;
        let version = u16::from_le_bytes([v[0], v[1]]);
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Format {
                offset: offset - 2,
                message: format!("unsupported version {version}"),
            });
        }
        let l = take(&mut offset, 4, "header length")?;
        let header_len = u32::from_le_bytes([l[0], l[1], l[2], l[3]]) as usize;
        let header_bytes = take(&mut offset, header_len, "JSON header")?;
        let header: HeaderJson = serde_json::from_slice(header_bytes)
            .map_err(|e| CheckpointError::Header(e.to_string()))?;

        let mut tensors = ParamMap::new();
        let mut opt_m = ParamMap::new();
        let mut opt_v = ParamMap::new();
        while offset < bytes.len() {
            let (name, tensor) = read_tensor(bytes, &mut offset)?;
            if let Some(rest) = name.strip_prefix("opt.m.") {
                opt_m.insert(rest, tensor);
            } else if let Some(rest) = name.strip_prefix("opt.v.") {
                opt_v.insert(rest, tensor);
            } else {
                tensors.insert(&name, tensor);
            }
        }

        header.config.validate().map_err(|e| CheckpointError::Header(e.to_string()))?;
        let params = DenoiserParams {
            config: header.config,
            tensors,
        };
        let optimizer_state = if header.has_optimizer_state {
            Some(AdamState { m: opt_m, v: opt_v })
        } else {
            None
        };
        Ok(DenoiserCheckpoint {
            params,
            schedule: header.schedule,
            step: header.step,
            class_names: header.class_names,
            face_histograms: header.face_histograms,
            optimizer_state,
        })
    }

    pub fn write_to(&self, path: &std::path::Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(path: &std::path::Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

fn write_tensor(out: &mut Vec<u8>, name: &str, tensor: &Tensor) {
    let name_bytes = name.as_bytes();
    out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(name_bytes);
    out.push(1u8); // f64
    out.push(tensor.dims().len() as u8);
    for &d in tensor.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in tensor.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_tensor(bytes: &[u8], offset: &mut usize) -> Result<(String, Tensor), CheckpointError> {
    let fail = |offset: usize, message: String| CheckpointError::Format { offset, message };
    let need = |offset: usize, n: usize| -> Result<(), CheckpointError> {
        if offset + n > bytes.len() {
            Err(fail(offset, "truncated tensor record".into()))
        } else {
            Ok(())
        }
    };
    need(*offset, 2)?;
    let name_len = u16::from_le_bytes([bytes[*offset], bytes[*offset + 1]]) as usize;
    *offset += 2;
    need(*offset, name_len)?;
    let name = std::str::from_utf8(&bytes[*offset..*offset + name_len])
        .map_err(|_| fail(*offset, "tensor name is not UTF-8".into()))?
        .to_string();
    *offset += name_len;
    need(*offset, 2)?;
    let dtype = bytes[*offset];
    let rank = bytes[*offset + 1] as usize;
    *offset += 2;
    if dtype > 1 {
        return Err(fail(*offset - 2, format!("unknown dtype {dtype}")));
    }
    need(*offset, rank * 8)?;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[*offset..*offset + 8]);
        dims.push(u64::from_le_bytes(b) as usize);
        *offset += 8;
    }
    let len: usize = dims.iter().product();
    let elem = if dtype == 0 { 4 } else { 8 };
    need(*offset, len * elem)?;
    let mut data = Vec::with_capacity(len);
    for i in 0..len {
        let at = *offset + i * elem;
        let x = if dtype == 0 {
            let mut b = [0u8; 4];
            b.copy_from_slice(&bytes[at..at + 4]);
            f32::from_le_bytes(b) as f64
        } else {
            let mut b = [0u8; 8];
            b.copy_from_slice(&bytes[at..at + 8]);
            f64::from_le_bytes(b)
        };
        data.push(x);
    }
    *offset += len * elem;
    Ok((name, Tensor::from_vec(&dims, data)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{forward, DenoiserConfig};
    use crate::schedule::cosine_schedule;
    use crate::soup::QuantizedTriangleSoup;

    fn small_checkpoint() -> DenoiserCheckpoint {
        let config = DenoiserConfig {
            embed_dim: 4,
            face_dim: 8,
            depth: 2,
            heads: 2,
            max_faces: 4,
            categories: 8,
            class_count: 2,
            skip_connections: true,
        };
        let params = DenoiserParams::init(&config, 99).unwrap();
        let opt = AdamState::new(&params.tensors);
        DenoiserCheckpoint {
            params,
            schedule: ScheduleConfig {
                timesteps: 20,
                s: 0.008,
                beta_clip: 0.999,
            },
            step: 1234,
            class_names: vec!["a".into(), "b".into()],
            face_histograms: vec![vec![(4, 3), (6, 1)], vec![(2, 5)]],
            optimizer_state: Some(opt),
        }
    }

    #[test]
    fn round_trip_is_byte_identical_and_forward_exact() {
        let ckpt = small_checkpoint();
        let bytes = ckpt.to_bytes();
        let reread = DenoiserCheckpoint::from_bytes(&bytes).unwrap();
        assert_eq!(reread.to_bytes(), bytes);
        assert_eq!(reread.step, 1234);
        assert_eq!(reread.params, ckpt.params);
        assert_eq!(reread.optimizer_state, ckpt.optimizer_state);

        let sched = cosine_schedule(20, 0.008, 0.999).unwrap();
        let soup = QuantizedTriangleSoup::new(vec![[[1, 2, 3], [4, 5, 6], [7, 0, 1]]], 3, 0, 4).unwrap();
        let a = forward(&ckpt.params, &soup, 7, 1, &sched).unwrap();
        let b = forward(&reread.params, &soup, 7, 1, &sched).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_magic_names_offset() {
        let mut bytes = small_checkpoint().to_bytes();
        bytes[1] = b'x';
        match DenoiserCheckpoint::from_bytes(&bytes) {
            Err(CheckpointError::Format { offset: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncation_names_offset() {
        let bytes = small_checkpoint().to_bytes();
        match DenoiserCheckpoint::from_bytes(&bytes[..bytes.len() - 5]) {
            Err(CheckpointError::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn optional_optimizer_state() {
        let mut ckpt = small_checkpoint();
        ckpt.optimizer_state = None;
        let reread = DenoiserCheckpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert!(reread.optimizer_state.is_none());
    }
}
