//! Parameter checkpoints: a little-endian `f64` payload file next to a JSON
//! manifest (`<payload>.json`) naming every tensor, its shape and offset.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ParamStore, Tensor};

pub const CHECKPOINT_FORMAT: &str = "hypertab-ckpt-v1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed checkpoint manifest: {0}")]
    Manifest(String),
    #[error("config hash mismatch: expected {expected}, manifest has {found}")]
    HashMismatch { expected: String, found: String },
    #[error("payload length mismatch: manifest needs {expected} bytes, file has {found}")]
    Length { expected: u64, found: u64 },
    #[error("payload checksum mismatch (expected {expected}, computed {found})")]
    Checksum { expected: String, found: String },
    #[error("parameter {name}: checkpoint shape {found:?} does not match model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter {0} missing from checkpoint")]
    MissingParam(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload in `f64` elements.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub step: u64,
    pub config_hash: String,
    pub payload_bytes: u64,
    pub payload_sha256: String,
    pub params: Vec<ManifestEntry>,
}

pub fn manifest_path(payload: &Path) -> PathBuf {
    let mut s = payload.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_checkpoint(store: &ParamStore, path: &Path, config_hash: &str) -> Result<CheckpointManifest, CheckpointError> {
    let mut payload = Vec::with_capacity(store.num_scalars() * 8);
    let mut entries = Vec::with_capacity(store.len());
    let mut offset = 0u64;
    for (name, t) in store.iter() {
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len() as u64;
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        step: store.step(),
        config_hash: config_hash.to_string(),
        payload_bytes: payload.len() as u64,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
        params: entries,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, &payload).map_err(io_err(path))?;
    let mpath = manifest_path(path);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    fs::write(&mpath, text).map_err(io_err(&mpath))?;
    Ok(manifest)
}

/// Load and validate a checkpoint. With `expected_hash`, the manifest's config
/// hash must match exactly.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>) -> Result<(ParamStore, CheckpointManifest), CheckpointError> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(CheckpointError::Manifest(format!("unknown format {}", manifest.format)));
    }
    if let Some(h) = expected_hash {
        if h != manifest.config_hash {
            return Err(CheckpointError::HashMismatch {
                expected: h.to_string(),
                found: manifest.config_hash.clone(),
            });
        }
    }
    let needed: u64 = manifest.params.iter().map(|e| e.shape.iter().product::<usize>() as u64 * 8).sum();
    if needed != manifest.payload_bytes {
        return Err(CheckpointError::Manifest(format!(
            "manifest shapes need {needed} bytes but declare {}",
            manifest.payload_bytes
        )));
    }
    let payload = fs::read(path).map_err(io_err(path))?;
    if payload.len() as u64 != manifest.payload_bytes {
        return Err(CheckpointError::Length {
            expected: manifest.payload_bytes,
            found: payload.len() as u64,
        });
    }
    let digest = hex::encode(Sha256::digest(&payload));
    if digest != manifest.payload_sha256 {
        return Err(CheckpointError::Checksum {
            expected: manifest.payload_sha256.clone(),
            found: digest,
        });
    }
    let mut store = ParamStore::new();
    for e in &manifest.params {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize * 8;
        let end = start + n * 8;
        if end > payload.len() {
            return Err(CheckpointError::Length {
                expected: end as u64,
                found: payload.len() as u64,
            });
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| CheckpointError::Manifest(err.to_string()))?;
        store
            .insert(e.name.clone(), t)
            .map_err(|err| CheckpointError::Manifest(err.to_string()))?;
    }
    store.set_step(manifest.step);
    Ok((store, manifest))
}

/// Check that `loaded` provides every tensor of `model` with the same shape.
pub fn validate_against(model: &ParamStore, loaded: &ParamStore) -> Result<(), CheckpointError> {
    for (name, t) in model.iter() {
        let found = loaded
            .get(name)
            .ok_or_else(|| CheckpointError::MissingParam(name.clone()))?;
        if found.shape() != t.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: t.shape().to_vec(),
                found: found.shape().to_vec(),
            });
        }
    }
    Ok(())
}
