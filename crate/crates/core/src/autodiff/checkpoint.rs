//! Parameter checkpoints: a flat little-endian fp64 blob plus a JSON
//! manifest listing each array's name, shape and byte offset.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::Params;
use super::tensor::Tensor;
use crate::error::AutodiffError;

pub const FORMAT: &str = "metaproto-checkpoint-v1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "lowercase")]
pub enum ArrayKind {
    Param,
    Buffer,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub kind: ArrayKind,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format: String,
    pub byte_order: String,
    pub dtype: String,
    pub arrays: Vec<ArrayEntry>,
    /// Free-form metadata (the backbone config, training step, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// `model.bin` -> `model.json`.
pub fn manifest_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> AutodiffError {
    AutodiffError::Checkpoint(format!("{}: {e}", path.display()))
}

pub fn encode(params: &Params, meta: serde_json::Value) -> (Vec<u8>, Manifest) {
    let mut blob = Vec::new();
    let mut arrays = Vec::new();
    let all = params
        .trainable
        .iter()
        .map(|(k, t)| (k, t, ArrayKind::Param))
        .chain(params.buffers.iter().map(|(k, t)| (k, t, ArrayKind::Buffer)));
    for (name, t, kind) in all {
        arrays.push(ArrayEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
            kind,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        byte_order: "little".to_string(),
        dtype: "f64".to_string(),
        arrays,
        meta,
    };
    (blob, manifest)
}

pub fn decode(blob: &[u8], manifest: &Manifest) -> Result<Params, AutodiffError> {
    if manifest.format != FORMAT || manifest.dtype != "f64" || manifest.byte_order != "little" {
        return Err(AutodiffError::Checkpoint(format!(
            "unsupported container {} / {} / {}",
            manifest.format, manifest.dtype, manifest.byte_order
        )));
    }
    let mut params = Params::default();
    for entry in &manifest.arrays {
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + 8 * n;
        let bytes = blob.get(entry.offset..end).ok_or_else(|| {
            AutodiffError::Checkpoint(format!("array `{}` overruns the {}-byte blob", entry.name, blob.len()))
        })?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(entry.shape.clone(), data)?;
        match entry.kind {
            ArrayKind::Param => params.insert(entry.name.clone(), t),
            ArrayKind::Buffer => params.insert_buffer(entry.name.clone(), t),
        }
    }
    Ok(params)
}

pub fn save(params: &Params, meta: serde_json::Value, bin: &Path) -> Result<(), AutodiffError> {
    let (blob, manifest) = encode(params, meta);
    if let Some(dir) = bin.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(bin, blob).map_err(|e| io_err(bin, e))?;
    let mpath = manifest_path(bin);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, text).map_err(|e| io_err(&mpath, e))
}

pub fn load(bin: &Path) -> Result<(Params, Manifest), AutodiffError> {
    let mpath = manifest_path(bin);
    let text = fs::read_to_string(&mpath).map_err(|e| io_err(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| io_err(&mpath, e))?;
    let blob = fs::read(bin).map_err(|e| io_err(bin, e))?;
    Ok((decode(&blob, &manifest)?, manifest))
}
