//! Dataset assembly: audio to pooled log-Mel patches, the leaf split, the
//! train/validation/eval pools and feature normalization.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DataSource, ExperimentConfig};
use crate::autodiff::Tensor;
use crate::embedding::BackboneKind;
use crate::episodes::{build_split, PatchPool, SplitPlan};
use crate::error::{Error, FeatureError, Result};
use crate::features::cache::FeatureCache;
use crate::features::{audio_io, clip_patches, AudioClip, LogMel, LogMelPatch, SynthManifest};
use crate::tree::{load_tree, ClassTree, NodeId};

/// Every patch of a corpus, pooled and flattened, with its label and source clip.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub patches: Vec<Vec<f64>>,
    /// `[mel, frames]` after pooling.
    pub shape: [usize; 2],
    pub labels: Vec<String>,
    pub sources: Vec<String>,
    /// Full-height hierarchy the corpus is labelled with.
    pub tree: ClassTree,
    /// Leaf -> family, for the balanced split.
    pub families: BTreeMap<String, String>,
}

/// Mean-pool a `[mel, frames]` matrix by `[pm, pf]`, dropping remainders.
pub fn pool_patch(data: &Tensor, pool: [usize; 2]) -> (Vec<f64>, [usize; 2]) {
    let (m, f) = (data.shape()[0], data.shape()[1]);
    let (om, of) = (m / pool[0], f / pool[1]);
    let mut out = vec![0.0; om * of];
    let norm = (pool[0] * pool[1]) as f64;
    for i in 0..om {
        for j in 0..of {
            let mut s = 0.0;
            for a in 0..pool[0] {
                let row = &data.data()[(i * pool[0] + a) * f..];
                s += row[j * pool[1]..(j + 1) * pool[1]].iter().sum::<f64>();
            }
            out[i * of + j] = s / norm;
        }
    }
    (out, [om, of])
}

fn data_err(e: impl std::fmt::Display) -> Error {
    Error::Data(e.to_string())
}

/// Families as the level-1 ancestors of each leaf in `tree`.
pub fn families_from_tree(tree: &ClassTree, leaves: &BTreeSet<String>) -> Result<BTreeMap<String, String>> {
    if tree.height() == 0 {
        return Err(Error::Config("family-balanced split needs a tree of height at least 1".into()));
    }
    leaves
        .iter()
        .map(|l| {
            let id = tree.leaf(l).ok_or_else(|| data_err(format!("label `{l}` is not a leaf of the tree")))?;
            let fam = tree.ancestors(id)?[1];
            Ok((l.clone(), tree.node(fam).name.clone()))
        })
        .collect()
}

/// Full-height tree and leaf -> family map without extracting any features.
pub fn corpus_outline(cfg: &ExperimentConfig) -> Result<(ClassTree, BTreeMap<String, String>)> {
    match &cfg.data.source {
        DataSource::Synthetic { manifest } => {
            let m = SynthManifest::load(manifest)?;
            let tree = if cfg.tree.source == "dataset" { m.tree()? } else { load_tree(&cfg.tree.source)? };
            Ok((tree, m.family_map()))
        }
        DataSource::AudioDir { path } => {
            if cfg.tree.source == "dataset" {
                return Err(Error::Config("an audio directory needs an explicit tree.source".into()));
            }
            let tree = load_tree(&cfg.tree.source)?;
            let labels: BTreeSet<String> =
                audio_io::wav_files(Path::new(path))?.into_iter().map(|(l, _)| l).collect();
            let fams = families_from_tree(&tree, &labels)?;
            Ok((tree, fams))
        }
    }
}

impl Dataset {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let (tree, families) = corpus_outline(cfg)?;
        let mel = LogMel::default();
        let pre = cfg.data.preprocess;
        let settings = serde_json::json!({ "preprocess": pre, "source": cfg.data.source });
        let cache = cfg.data.cache_dir.as_ref().map(|d| FeatureCache::new(d, settings.clone()));

        let per_clip: Vec<Vec<LogMelPatch>> = match &cfg.data.source {
            DataSource::Synthetic { manifest } => {
                let m = SynthManifest::load(manifest)?;
                let jobs: Vec<(usize, usize)> =
                    (0..m.leaves.len()).flat_map(|l| (0..m.clips_per_leaf).map(move |c| (l, c))).collect();
                jobs.par_iter()
                    .map(|&(leaf, clip)| {
                        let compute = || clip_patches(&m.render_clip(leaf, clip)?, &pre, &mel);
                        match &cache {
                            Some(c) => c.get_or_compute(&m.leaves[leaf].name, &format!("{}-{clip:03}", m.leaves[leaf].name), compute),
                            None => compute(),
                        }
                    })
                    .collect::<std::result::Result<_, FeatureError>>()?
            }
            DataSource::AudioDir { path } => {
                let files = audio_io::wav_files(Path::new(path))?;
                files
                    .par_iter()
                    .map(|(label, file)| {
                        let compute = || {
                            let clip: AudioClip = audio_io::read_wav(file, label)?;
                            clip_patches(&clip, &pre, &mel)
                        };
                        let source = file.display().to_string();
                        match &cache {
                            Some(c) => c.get_or_compute(label, &source, compute),
                            None => compute(),
                        }
                    })
                    .collect::<std::result::Result<_, FeatureError>>()?
            }
        };

        let mut data = Dataset {
            patches: Vec::new(),
            shape: [0, 0],
            labels: Vec::new(),
            sources: Vec::new(),
            tree,
            families,
        };
        for p in per_clip.into_iter().flatten() {
            if data.tree.leaf(&p.label).is_none() {
                return Err(data_err(format!("label `{}` is not a leaf of the tree", p.label)));
            }
            let (v, shape) = pool_patch(&p.data, cfg.data.pool);
            data.shape = shape;
            data.patches.push(v);
            data.labels.push(p.label);
            data.sources.push(p.source);
        }
        if data.patches.is_empty() {
            return Err(data_err("corpus produced no patches"));
        }
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Patch counts per label.
    pub fn class_sizes(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for l in &self.labels {
            *out.entry(l.clone()).or_insert(0) += 1;
        }
        out
    }
}

/// Per-mel-row mean and standard deviation over the training patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl MelStats {
    pub fn fit(data: &Dataset, ids: &[usize]) -> Self {
        let [m, f] = data.shape;
        let mut sum = vec![0.0; m];
        let mut sq = vec![0.0; m];
        for &i in ids {
            for r in 0..m {
                for v in &data.patches[i][r * f..(r + 1) * f] {
                    sum[r] += v;
                    sq[r] += v * v;
                }
            }
        }
        let n = (ids.len() * f).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(s, mu)| (s / n - mu * mu).max(0.0).sqrt().max(1e-3)).collect();
        MelStats { mean, std }
    }

    pub fn apply(&self, patch: &[f64], frames: usize, out: &mut Vec<f64>) {
        for (r, row) in patch.chunks_exact(frames).enumerate() {
            out.extend(row.iter().map(|v| (v - self.mean[r]) / self.std[r]));
        }
    }
}

/// Everything a run needs: corpus, split, pools, trees and normalization.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub data: Arc<Dataset>,
    pub split: SplitPlan,
    /// Tree the model trains and predicts with.
    pub model_tree: ClassTree,
    /// Tree mistake severity is scored against.
    pub severity_tree: ClassTree,
    pub train_pool: PatchPool,
    pub val_pool: PatchPool,
    pub eval_pool: PatchPool,
    pub stats: MelStats,
}

impl Experiment {
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        let data = Arc::new(Dataset::load(&config)?);
        Self::with_data(config, data)
    }

    /// Reuse an already loaded corpus; only tree, split and pools are rebuilt.
    pub fn with_data(config: ExperimentConfig, data: Arc<Dataset>) -> Result<Self> {
        config.validate()?;
        let split = build_split(&data.families, config.data.train_fraction, config.seeds.split)?;
        let model_tree = model_tree(&config, &data.tree)?;
        let severity_tree = match &config.tree.severity_tree {
            Some(src) => load_tree(src)?,
            None => data.tree.clone(),
        };
        for leaf in data.families.keys() {
            if model_tree.leaf(leaf).is_none() || severity_tree.leaf(leaf).is_none() {
                return Err(data_err(format!("leaf `{leaf}` missing from the model or severity tree")));
            }
        }

        let train: BTreeSet<String> = split.train().into_iter().collect();
        let eval: BTreeSet<String> = split.eval().into_iter().collect();

        // hold out whole source clips of each training class for validation
        let mut rng = ChaCha8Rng::seed_from_u64(config.seeds.split ^ 0x5eed_0f_7a1);
        let mut held: BTreeSet<&str> = BTreeSet::new();
        if config.data.val_fraction > 0.0 {
            for class in &train {
                let sources: BTreeSet<&str> = data
                    .labels
                    .iter()
                    .zip(&data.sources)
                    .filter(|(l, _)| *l == class)
                    .map(|(_, s)| s.as_str())
                    .collect();
                let mut sources: Vec<&str> = sources.into_iter().collect();
                if sources.len() < 2 {
                    continue;
                }
                sources.shuffle(&mut rng);
                let k = ((config.data.val_fraction * sources.len() as f64).round() as usize).clamp(1, sources.len() - 1);
                held.extend(&sources[..k]);
            }
        }
        let mask = |keep_held: bool| -> Vec<&str> {
            data.labels
                .iter()
                .zip(&data.sources)
                .map(|(l, s)| if held.contains(s.as_str()) == keep_held { l.as_str() } else { "" })
                .collect()
        };
        let train_pool = PatchPool::from_labels(&mask(false), &train);
        let val_pool = if held.is_empty() { train_pool.clone() } else { PatchPool::from_labels(&mask(true), &train) };
        let eval_pool = PatchPool::from_labels(&data.labels, &eval);
        let train_ids: Vec<usize> = train_pool.members.iter().flatten().copied().collect();
        let stats = MelStats::fit(&data, &train_ids);
        Ok(Experiment { config, data, split, model_tree, severity_tree, train_pool, val_pool, eval_pool, stats })
    }

    /// Normalized model input for the given patch ids.
    pub fn batch(&self, ids: &[usize]) -> Tensor {
        let [m, f] = self.data.shape;
        let mut out = Vec::with_capacity(ids.len() * m * f);
        for &i in ids {
            self.stats.apply(&self.data.patches[i], f, &mut out);
        }
        let shape = match self.config.model.kind {
            BackboneKind::Conv4 => vec![ids.len(), m, f],
            BackboneKind::Mlp => vec![ids.len(), m * f],
        };
        Tensor::new(shape, out).expect("consistent patch sizes")
    }

    /// Model-tree node of each patch's label.
    pub fn leaf_ids(&self, ids: &[usize]) -> Result<Vec<NodeId>> {
        ids.iter()
            .map(|&i| {
                self.model_tree
                    .leaf(&self.data.labels[i])
                    .ok_or_else(|| data_err(format!("label `{}` not in model tree", self.data.labels[i])))
            })
            .collect()
    }

    /// Checks that the model input matches the patch geometry.
    pub fn check_input_shape(&self) -> Result<()> {
        let [m, f] = self.data.shape;
        let expected = match self.config.model.kind {
            BackboneKind::Conv4 => vec![m, f],
            BackboneKind::Mlp => vec![m * f],
        };
        if self.config.model.input_shape != expected {
            return Err(Error::Config(format!(
                "model.input_shape {:?} does not match the pooled patch shape {:?}",
                self.config.model.input_shape, expected
            )));
        }
        Ok(())
    }
}

/// Source tree, optionally leaf-permuted, shortened to the configured height.
pub fn model_tree(cfg: &ExperimentConfig, full: &ClassTree) -> Result<ClassTree> {
    let mut t = full.clone();
    if let Some(seed) = cfg.tree.random_swap_seed {
        t = t.random_swap_tree(seed, cfg.tree.swaps_per_leaf);
    }
    if let Some(h) = cfg.tree.height {
        t = t.shorten_to_height(h)?;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_averages_blocks() {
        let t = Tensor::new(vec![2, 5], (0..10).map(|v| v as f64).collect()).unwrap();
        let (v, s) = pool_patch(&t, [2, 2]);
        assert_eq!(s, [1, 2]);
        assert_eq!(v, vec![(0.0 + 1.0 + 5.0 + 6.0) / 4.0, (2.0 + 3.0 + 7.0 + 8.0) / 4.0]);
        let (same, _) = pool_patch(&t, [1, 1]);
        assert_eq!(same, t.data());
    }

    #[test]
    fn families_from_hierarchy() {
        let t = ClassTree::parse(crate::tree::BUNDLED_SYNTHETIC).unwrap();
        let leaves: BTreeSet<String> = ["synth_harp".to_string(), "synth_gong".to_string()].into();
        let f = families_from_tree(&t, &leaves).unwrap();
        assert_eq!(f["synth_harp"], "plucked");
        assert_eq!(f["synth_gong"], "struck");
        assert!(families_from_tree(&t.shorten_to_height(0).unwrap(), &leaves).is_err());
    }
}
