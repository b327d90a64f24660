//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.json   {format_version, stage, step, seed, config_hash}
//! <dir>/index.json      {format_version, tensors: [{name, rows, cols, offset}]}
//! <dir>/params.bin      little-endian f32 values, tensors back to back
//! ```
//! Offsets count f32 elements from the start of `params.bin`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, ParamStore};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub stage: String,
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
}

impl CheckpointManifest {
    pub fn new(stage: impl Into<String>, step: u64, seed: u64, config_hash: impl Into<String>) -> Self {
        Self { format_version: CHECKPOINT_FORMAT_VERSION, stage: stage.into(), step, seed, config_hash: config_hash.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    format_version: u32,
    tensors: Vec<TensorEntry>,
}

/// Writes `store` and `manifest` into `dir`, creating it if needed.
pub fn save(dir: &Path, store: &ParamStore, manifest: &CheckpointManifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(store.scalar_count() * 4);
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0;
    for (_, name, m) in store.iter() {
        tensors.push(TensorEntry { name: name.to_owned(), rows: m.rows(), cols: m.cols(), offset });
        for v in m.data() {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        offset += m.data().len();
    }
    std::fs::write(dir.join("params.bin"), blob)?;
    let index = Index { format_version: CHECKPOINT_FORMAT_VERSION, tensors };
    std::fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    let raw = std::fs::read_to_string(&path)?;
    let value: serde_json::Value =
        serde_json::from_str(&raw).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let version = require_u64(&value, "format_version", &path)? as u32;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Migration { path, found: version, expected: CHECKPOINT_FORMAT_VERSION });
    }
    Ok(CheckpointManifest {
        format_version: version,
        stage: require_str(&value, "stage", &path)?,
        step: require_u64(&value, "step", &path)?,
        seed: require_u64(&value, "seed", &path)?,
        config_hash: require_str(&value, "config_hash", &path)?,
    })
}

fn require_u64(v: &serde_json::Value, field: &str, path: &Path) -> Result<u64> {
    v.get(field).and_then(serde_json::Value::as_u64).ok_or_else(|| Error::Field {
        path: path.into(),
        field: field.into(),
        message: "missing or not a non-negative integer".into(),
    })
}

fn require_str(v: &serde_json::Value, field: &str, path: &Path) -> Result<String> {
    v.get(field).and_then(serde_json::Value::as_str).map(str::to_owned).ok_or_else(|| Error::Field {
        path: path.into(),
        field: field.into(),
        message: "missing or not a string".into(),
    })
}

/// Reads a checkpoint written by [`save`].
pub fn load(dir: &Path) -> Result<(ParamStore, CheckpointManifest)> {
    let manifest = load_manifest(dir)?;
    let index_path = dir.join("index.json");
    let index: Index = serde_json::from_str(&std::fs::read_to_string(&index_path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", index_path.display())))?;
    if index.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Migration { path: index_path, found: index.format_version, expected: CHECKPOINT_FORMAT_VERSION });
    }
    let blob = std::fs::read(dir.join("params.bin"))?;
    if blob.len() % 4 != 0 {
        return Err(Error::Format("params.bin length is not a multiple of 4".into()));
    }
    let floats: Vec<f32> = blob.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let mut store = ParamStore::new();
    for t in index.tensors {
        let n = t.rows * t.cols;
        let slice = floats.get(t.offset..t.offset + n).ok_or_else(|| Error::Field {
            path: index_path.clone(),
            field: format!("tensors[{}]", t.name),
            message: "extends past the end of params.bin".into(),
        })?;
        store.insert(t.name, Matrix::from_vec(t.rows, t.cols, slice.iter().map(|&v| f64::from(v)).collect()));
    }
    Ok((store, manifest))
}
