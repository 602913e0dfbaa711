//! On-disk log-Mel cache: one little-endian fp64 blob per clip plus a JSON
//! sidecar with label, source, patch geometry and the settings that produced it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::LogMelPatch;
use crate::autodiff::Tensor;
use crate::error::FeatureError;

pub const CACHE_FORMAT: &str = "metaproto-features-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub label: String,
    pub source: String,
    pub n_mels: usize,
    pub frames: usize,
    /// Segment index of each stored patch within its clip.
    pub segments: Vec<usize>,
    /// Settings fingerprint; entries whose fingerprint differs are ignored.
    pub settings: Value,
}

#[derive(Debug, Clone)]
pub struct FeatureCache {
    root: PathBuf,
    settings: Value,
}

fn cache_err(path: &Path, e: impl std::fmt::Display) -> FeatureError {
    FeatureError::Cache(format!("{}: {e}", path.display()))
}

fn file_stem(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

impl FeatureCache {
    pub fn new(root: impl Into<PathBuf>, settings: Value) -> Self {
        FeatureCache { root: root.into(), settings }
    }

    fn paths(&self, label: &str, source: &str) -> (PathBuf, PathBuf) {
        let dir = self.root.join(file_stem(label));
        let stem = file_stem(source);
        (dir.join(format!("{stem}.bin")), dir.join(format!("{stem}.json")))
    }

    pub fn load(&self, label: &str, source: &str) -> Result<Option<Vec<LogMelPatch>>, FeatureError> {
        let (bin, json) = self.paths(label, source);
        let Ok(text) = std::fs::read_to_string(&json) else { return Ok(None) };
        let side: Sidecar = serde_json::from_str(&text).map_err(|e| cache_err(&json, e))?;
        if side.format != CACHE_FORMAT || side.settings != self.settings || side.label != label || side.source != source {
            return Ok(None);
        }
        let bytes = std::fs::read(&bin).map_err(|e| cache_err(&bin, e))?;
        let per = side.n_mels * side.frames;
        if bytes.len() != per * side.segments.len() * 8 {
            return Err(cache_err(&bin, format!("expected {} bytes, found {}", per * side.segments.len() * 8, bytes.len())));
        }
        let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let patches = values
            .chunks_exact(per.max(1))
            .take(side.segments.len())
            .map(|c| LogMelPatch {
                data: Tensor::new(vec![side.n_mels, side.frames], c.to_vec()).unwrap(),
                source: source.to_string(),
                label: label.to_string(),
            })
            .collect();
        Ok(Some(patches))
    }

    pub fn store(&self, label: &str, source: &str, patches: &[LogMelPatch]) -> Result<(), FeatureError> {
        let (bin, json) = self.paths(label, source);
        let dir = bin.parent().unwrap();
        std::fs::create_dir_all(dir).map_err(|e| cache_err(dir, e))?;
        let (n_mels, frames) = patches.first().map_or((0, 0), |p| (p.data.shape()[0], p.data.shape()[1]));
        let mut bytes = Vec::with_capacity(patches.len() * n_mels * frames * 8);
        for p in patches {
            if p.data.shape() != [n_mels, frames] {
                return Err(cache_err(&bin, "patches of differing shapes"));
            }
            bytes.extend(p.data.data().iter().flat_map(|v| v.to_le_bytes()));
        }
        std::fs::write(&bin, bytes).map_err(|e| cache_err(&bin, e))?;
        let side = Sidecar {
            format: CACHE_FORMAT.into(),
            label: label.into(),
            source: source.into(),
            n_mels,
            frames,
            segments: (0..patches.len()).collect(),
            settings: self.settings.clone(),
        };
        let text = serde_json::to_string_pretty(&side).map_err(|e| cache_err(&json, e))?;
        std::fs::write(&json, text).map_err(|e| cache_err(&json, e))
    }

    pub fn get_or_compute(
        &self,
        label: &str,
        source: &str,
        compute: impl FnOnce() -> Result<Vec<LogMelPatch>, FeatureError>,
    ) -> Result<Vec<LogMelPatch>, FeatureError> {
        if let Some(p) = self.load(label, source)? {
            return Ok(p);
        }
        let patches = compute()?;
        self.store(label, source, &patches)?;
        Ok(patches)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch(seed: f64) -> LogMelPatch {
        LogMelPatch {
            data: Tensor::new(vec![2, 3], (0..6).map(|i| seed + i as f64 / 7.0).collect()).unwrap(),
            source: "clip/1".into(),
            label: "synth_oboe".into(),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FeatureCache::new(dir.path(), serde_json::json!({"hop": 0.5}));
        let ps = vec![patch(0.1), patch(-3.3)];
        cache.store("synth_oboe", "clip/1", &ps).unwrap();
        assert_eq!(cache.load("synth_oboe", "clip/1").unwrap().unwrap(), ps);
        assert!(cache.load("synth_oboe", "clip/2").unwrap().is_none());
    }

    #[test]
    fn settings_change_invalidates() {
        let dir = tempfile::tempdir().unwrap();
        FeatureCache::new(dir.path(), serde_json::json!(1)).store("a", "b", &[patch(0.0)]).unwrap();
        let other = FeatureCache::new(dir.path(), serde_json::json!(2));
        assert!(other.load("a", "b").unwrap().is_none());
        let mut calls = 0;
        other
            .get_or_compute("a", "b", || {
                calls += 1;
                Ok(vec![patch(1.0)])
            })
            .unwrap();
        let again = other.get_or_compute("a", "b", || unreachable!()).unwrap();
        assert_eq!(calls, 1);
        assert_eq!(again[0].data, patch(1.0).data);
    }

    #[test]
    fn truncated_blob_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FeatureCache::new(dir.path(), Value::Null);
        cache.store("a", "b", &[patch(0.0)]).unwrap();
        let bin = dir.path().join("a").join("b.bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..10]).unwrap();
        assert!(matches!(cache.load("a", "b"), Err(FeatureError::Cache(_))));
    }
}
