//! Experiment configuration: TOML or JSON file plus `key.path=value`
//! overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::embedding::BackboneConfig;
use crate::error::{Error, Result};
use crate::features::Preprocess;
use crate::protonet::Distance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    /// Rendered on the fly from a synthesis manifest (`bundled` or a path).
    Synthetic { manifest: String },
    /// `<leaf-label>/<file>.wav` directory.
    AudioDir { path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Feature cache directory; no caching when unset.
    pub cache_dir: Option<String>,
    pub preprocess: Preprocess,
    /// Average-pooling factors `[mel, frames]` applied to each log-Mel patch.
    pub pool: [usize; 2],
    pub train_fraction: f64,
    /// Share of each training class's source clips held out for validation.
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic { manifest: "bundled".into() },
            cache_dir: None,
            preprocess: Preprocess::default(),
            pool: [1, 1],
            train_fraction: 0.7,
            val_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TreeConfig {
    /// `dataset` (the synthetic manifest's own tree), `bundled:<name>`, or a path.
    pub source: String,
    /// Target height; the full tree when unset.
    pub height: Option<usize>,
    /// Replace the tree by a random leaf permutation with this seed.
    pub random_swap_seed: Option<u64>,
    pub swaps_per_leaf: usize,
    /// Tree used to score mistake severity; `source` at full height when unset.
    pub severity_tree: Option<String>,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            source: "dataset".into(),
            height: None,
            random_swap_seed: None,
            swaps_per_leaf: 1000,
            severity_tree: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Hierarchical,
    FlatBce,
    /// Plain prototypical-network loss, kept as an independent reference.
    Protonet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub alpha: f64,
    pub distance: Distance,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { kind: LossKind::Hierarchical, alpha: 1.0, distance: Distance::SquaredEuclidean }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub lr: f64,
    pub max_steps: usize,
    pub patience: usize,
    pub val_interval: usize,
    pub val_episodes: usize,
    pub val_queries: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            ways: 12,
            shots: 4,
            queries: 12,
            lr: 0.03,
            max_steps: 60_000,
            patience: 4_500,
            val_interval: 150,
            val_episodes: 20,
            val_queries: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Classes per episode; all evaluation classes (at most 12) when unset.
    pub ways: Option<usize>,
    /// Support sizes to evaluate; each gives its own report set.
    pub shots: Vec<usize>,
    pub queries: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { episodes: 100, ways: None, shots: vec![4], queries: 120 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub init: u64,
    pub split: u64,
    pub episodes: u64,
    pub validation: u64,
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { init: 0, split: 0, episodes: 1_000_000, validation: 2_000_000, eval: 3_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DataConfig,
    pub tree: TreeConfig,
    pub model: BackboneConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub seeds: Seeds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            data: DataConfig::default(),
            tree: TreeConfig::default(),
            model: BackboneConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            seeds: Seeds::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Parse an override value: JSON when it parses, a bare string otherwise.
fn override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Set `a.b.c = value` inside a JSON document, creating objects on the way.
pub fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(config_err(format!("empty segment in override path `{path}`")));
        }
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| config_err(format!("`{}` is not a table in override `{path}`", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("split yields at least one part")
}

impl ExperimentConfig {
    /// Parse TOML or JSON (by extension, falling back to content sniffing).
    pub fn from_str_any(text: &str, hint: Option<&str>) -> Result<Value> {
        let looks_json = text.trim_start().starts_with('{');
        if hint == Some("json") || (hint != Some("toml") && looks_json) {
            serde_json::from_str(text).map_err(|e| config_err(format!("config JSON: {e}")))
        } else {
            let v: toml::Value = toml::from_str(text).map_err(|e| config_err(format!("config TOML: {e}")))?;
            serde_json::to_value(v).map_err(|e| config_err(e.to_string()))
        }
    }

    /// Defaults, then the file (if any), then each `key=value` override.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        ExperimentConfig::default().layered(path, overrides)
    }

    /// `self`, then the file (if any), then each `key=value` override.
    pub fn layered(&self, path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = self.to_json();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            let hint = path.extension().and_then(|e| e.to_str());
            let file = Self::from_str_any(&text, hint)?;
            merge(&mut doc, file);
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| config_err(format!("override `{o}` is not key=value")))?;
            set_path(&mut doc, k.trim(), override_value(v.trim()))?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(doc).map_err(|e| config_err(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        for (name, v) in [
            ("train.ways", t.ways),
            ("train.shots", t.shots),
            ("train.queries", t.queries),
            ("train.max_steps", t.max_steps),
            ("train.val_interval", t.val_interval),
            ("train.val_episodes", t.val_episodes),
            ("train.val_queries", t.val_queries),
            ("eval.episodes", self.eval.episodes),
            ("eval.queries", self.eval.queries),
            ("data.pool[0]", self.data.pool[0]),
            ("data.pool[1]", self.data.pool[1]),
        ] {
            if v == 0 {
                return Err(config_err(format!("{name} must be positive")));
            }
        }
        if self.eval.shots.is_empty() || self.eval.shots.contains(&0) {
            return Err(config_err("eval.shots must list positive support sizes"));
        }
        if self.eval.ways == Some(0) {
            return Err(config_err("eval.ways must be positive"));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(config_err("train.lr must be positive"));
        }
        if !self.loss.alpha.is_finite() {
            return Err(config_err("loss.alpha must be finite"));
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(config_err("data.val_fraction must be in [0, 1)"));
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(config_err("data.train_fraction must be in (0, 1)"));
        }
        self.model.validate().map_err(|e| config_err(format!("model: {e}")))?;
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Recursive merge of `src` into `dst`; tables merge, everything else replaces.
fn merge(dst: &mut Value, src: Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = ExperimentConfig::load(None, &[]).unwrap();
        assert_eq!(c.train.ways, 12);
        assert_eq!(c.train.max_steps, 60_000);
        assert_eq!(c.eval.queries, 120);
    }

    #[test]
    fn toml_file_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(
            &p,
            "name = \"t\"\n[loss]\nalpha = 0.5\nkind = \"flat_bce\"\n[tree]\nheight = 1\n[data.source]\nkind = \"audio_dir\"\npath = \"x\"\n",
        )
        .unwrap();
        let c = ExperimentConfig::load(
            Some(&p),
            &["train.lr=0.001".into(), "loss.distance=euclidean".into(), "eval.shots=[1,4,8]".into()],
        )
        .unwrap();
        assert_eq!(c.name, "t");
        assert_eq!(c.loss.alpha, 0.5);
        assert_eq!(c.loss.kind, LossKind::FlatBce);
        assert_eq!(c.loss.distance, Distance::Euclidean);
        assert_eq!(c.tree.height, Some(1));
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.eval.shots, vec![1, 4, 8]);
        assert_eq!(c.train.ways, 12);
        assert_eq!(c.data.source, DataSource::AudioDir { path: "x".into() });
    }

    #[test]
    fn json_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"train": {"shots": 8}}"#).unwrap();
        assert_eq!(ExperimentConfig::load(Some(&p), &[]).unwrap().train.shots, 8);
    }

    #[test]
    fn config_errors() {
        let bad = |o: &str| ExperimentConfig::load(None, &[o.to_string()]).unwrap_err();
        assert!(matches!(bad("train.ways=0"), Error::Config(_)));
        assert!(matches!(bad("train.nope=1"), Error::Config(_)));
        assert!(matches!(bad("novalue"), Error::Config(_)));
        assert!(matches!(bad("train.lr.x=1"), Error::Config(_)));
        assert_eq!(bad("train.lr=-1").exit_code(), 2);
    }
}
