//! Checkpoint directory format:
//!
//! - `manifest.json`: format tag, class count, init seed, detector config and
//!   one `{name, shape, offset, len}` record per parameter (offset and length
//!   counted in `f64` elements).
//! - `params.bin`: every parameter's data as little-endian `f64`, concatenated
//!   in manifest order.
//!
//! Loading reproduces the saved parameters bit for bit.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{param_shapes, DetectorConfig, DetectorModel, Layers, LAYER_NAMES};
use crate::tensor::Tensor;

const FORMAT: &str = "tridet-checkpoint/1";
const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: malformed manifest: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {reason}")]
    Invalid { path: PathBuf, reason: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    num_classes: usize,
    seed: u64,
    config: DetectorConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_checkpoint(model: &DetectorModel, dir: &Path) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut bytes = Vec::with_capacity(model.num_params() * 8);
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, t) in LAYER_NAMES.iter().zip(model.params.to_vec()) {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: t.numel(),
        });
        offset += t.numel();
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        num_classes: model.num_classes,
        seed: model.seed,
        config: model.config.clone(),
        tensors,
    };
    let mpath = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, json).map_err(io_err(&mpath))?;
    let ppath = dir.join(PARAMS);
    fs::write(&ppath, bytes).map_err(io_err(&ppath))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<DetectorModel, CheckpointError> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| CheckpointError::Manifest {
        path: mpath.clone(),
        source,
    })?;
    let invalid = |reason: String| CheckpointError::Invalid {
        path: mpath.clone(),
        reason,
    };
    if manifest.format != FORMAT {
        return Err(invalid(format!("unsupported format `{}`", manifest.format)));
    }
    let ppath = dir.join(PARAMS);
    let bytes = fs::read(&ppath).map_err(io_err(&ppath))?;
    if bytes.len() % 8 != 0 {
        return Err(CheckpointError::Invalid {
            path: ppath,
            reason: format!("length {} is not a multiple of 8", bytes.len()),
        });
    }
    let floats: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let expected = param_shapes(&manifest.config, manifest.num_classes);
    if manifest.tensors.len() != LAYER_NAMES.len() {
        return Err(invalid(format!("expected {} tensors, found {}", LAYER_NAMES.len(), manifest.tensors.len())));
    }
    let mut tensors = Vec::with_capacity(LAYER_NAMES.len());
    for ((entry, name), shape) in manifest.tensors.iter().zip(LAYER_NAMES).zip(expected) {
        if entry.name != name || entry.shape != shape {
            return Err(invalid(format!(
                "tensor `{}` {:?} does not match expected `{name}` {shape:?}",
                entry.name, entry.shape
            )));
        }
        let end = entry.offset + entry.len;
        if end > floats.len() {
            return Err(invalid(format!("tensor `{name}` extends past end of {PARAMS}")));
        }
        let t = Tensor::from_vec(shape, floats[entry.offset..end].to_vec()).map_err(|e| invalid(e.to_string()))?;
        if !t.is_finite() {
            return Err(invalid(format!("tensor `{name}` contains non-finite values")));
        }
        tensors.push(t);
    }
    Ok(DetectorModel {
        config: manifest.config,
        num_classes: manifest.num_classes,
        seed: manifest.seed,
        params: Layers::from_vec(tensors).expect("20 parameters"),
    })
}

/// SHA-256 over class count, parameter shapes and raw parameter bits.
pub fn param_hash(model: &DetectorModel) -> String {
    let mut h = Sha256::new();
    h.update((model.num_classes as u64).to_le_bytes());
    for t in model.params.to_vec() {
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
