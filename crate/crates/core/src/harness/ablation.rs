//! Ablation sweeps: tree height, loss decay, shots, random trees and loss kind.
//! Every variant is trained from the same initialization and evaluated on the
//! same episode stream, so per-episode scores can be paired.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, LossKind};
use super::data::{Dataset, Experiment};
use super::evaluate::{evaluate, summarize, EpisodeReport, Summary};
use super::train::train;
use super::wilcoxon::{wilcoxon_signed_rank, Alternative, WilcoxonResult};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    Height,
    Alpha,
    Shots,
    RandomTrees,
    Loss,
}

impl std::str::FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "height" => Ok(AblationKind::Height),
            "alpha" => Ok(AblationKind::Alpha),
            "shots" => Ok(AblationKind::Shots),
            "random_trees" => Ok(AblationKind::RandomTrees),
            "loss" => Ok(AblationKind::Loss),
            other => Err(Error::Config(format!("unknown ablation kind `{other}`"))),
        }
    }
}

pub const ALPHAS: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];
pub const SHOTS: [usize; 4] = [1, 4, 8, 16];
pub const RANDOM_TREES: usize = 10;
pub const BASELINE: &str = "baseline";

#[derive(Debug, Clone)]
pub struct Variant {
    pub name: String,
    pub config: ExperimentConfig,
}

fn variant(name: impl Into<String>, base: &ExperimentConfig, edit: impl FnOnce(&mut ExperimentConfig)) -> Variant {
    let mut config = base.clone();
    edit(&mut config);
    let name = name.into();
    config.name = name.clone();
    Variant { name, config }
}

/// The H=0 model every variant is compared against.
pub fn baseline(base: &ExperimentConfig) -> Variant {
    variant(BASELINE, base, |c| {
        c.tree.height = Some(0);
        c.tree.random_swap_seed = None;
        c.loss.kind = LossKind::Hierarchical;
    })
}

/// Variants of a sweep; the first is always the baseline. `full_height` is the
/// height of the configured source tree.
pub fn variants(kind: AblationKind, base: &ExperimentConfig, full_height: usize) -> Vec<Variant> {
    let mut out = vec![baseline(base)];
    let height = base.tree.height.unwrap_or(full_height);
    match kind {
        AblationKind::Height => {
            for h in 1..=full_height {
                out.push(variant(format!("height_{h}"), base, |c| {
                    c.tree.height = Some(h);
                    c.loss.kind = LossKind::Hierarchical;
                }));
            }
        }
        AblationKind::Alpha => {
            for a in ALPHAS {
                out.push(variant(format!("alpha_{a}"), base, |c| {
                    c.loss.alpha = a;
                    c.tree.height = Some(height);
                    c.loss.kind = LossKind::Hierarchical;
                }));
            }
        }
        AblationKind::Shots => {
            out.push(variant(format!("height_{height}"), base, |c| c.tree.height = Some(height)));
            for v in &mut out {
                v.config.eval.shots = SHOTS.to_vec();
            }
        }
        AblationKind::RandomTrees => {
            for i in 0..RANDOM_TREES {
                out.push(variant(format!("random_tree_{i}"), base, |c| {
                    c.tree.random_swap_seed = Some(base.seeds.split.wrapping_add(1000 + i as u64));
                    c.tree.height = Some(height);
                    c.loss.kind = LossKind::Hierarchical;
                }));
            }
        }
        AblationKind::Loss => {
            out.push(variant("hierarchical", base, |c| {
                c.tree.height = Some(height);
                c.loss.kind = LossKind::Hierarchical;
            }));
            out.push(variant("flat_bce", base, |c| {
                c.tree.height = Some(height);
                c.loss.kind = LossKind::FlatBce;
            }));
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub shots: usize,
    pub best_step: usize,
    pub summary: Summary,
    #[serde(skip)]
    pub reports: Vec<EpisodeReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub variant: String,
    pub shots: usize,
    pub mean_f1_difference: f64,
    /// Two-sided test of paired per-episode F1 against the baseline.
    pub two_sided: Option<WilcoxonResult>,
    /// One-sided test that the variant beats the baseline.
    pub greater: Option<WilcoxonResult>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub kind: AblationKind,
    pub results: Vec<VariantResult>,
    pub comparisons: Vec<Comparison>,
}

/// Paired comparison of two report sets (matched by position).
pub fn compare_reports(name: &str, a: &[EpisodeReport], b: &[EpisodeReport]) -> Comparison {
    let fa: Vec<f64> = a.iter().map(|r| r.macro_f1).collect();
    let fb: Vec<f64> = b.iter().map(|r| r.macro_f1).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Comparison {
        variant: name.to_string(),
        shots: a.first().map_or(0, |r| r.shots),
        mean_f1_difference: mean(&fa) - mean(&fb),
        two_sided: wilcoxon_signed_rank(&fa, &fb, Alternative::TwoSided).ok(),
        greater: wilcoxon_signed_rank(&fa, &fb, Alternative::Greater).ok(),
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?);
    for r in rows {
        let line = serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::Data(e.to_string()))?;
    }
    f.flush().map_err(|e| Error::Data(e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Plot-ready rows: one line per (variant, shots, episode).
pub fn reports_csv(rows: &[(String, Vec<EpisodeReport>)]) -> String {
    let mut out = String::from("variant,shots,episode_seed,macro_f1,severity,mistakes\n");
    for (name, reports) in rows {
        for r in reports {
            let sev = r.severity.map(|s| s.to_string()).unwrap_or_default();
            out.push_str(&format!("{name},{},{},{},{sev},{}\n", r.shots, r.seed, r.macro_f1, r.mistakes));
        }
    }
    out
}

/// Train and evaluate every variant, writing per-variant reports under `out`.
pub fn run_ablation(kind: AblationKind, base: &ExperimentConfig, out: &Path, mut progress: impl FnMut(&str)) -> Result<AblationReport> {
    std::fs::create_dir_all(out).map_err(|e| Error::Data(format!("{}: {e}", out.display())))?;
    let data = Arc::new(Dataset::load(base)?);
    let full_height = data.tree.height();
    let mut results = Vec::new();
    for v in variants(kind, base, full_height) {
        progress(&format!("training {}", v.name));
        let exp = Experiment::with_data(v.config.clone(), data.clone())?;
        if kind == AblationKind::RandomTrees && v.name != BASELINE {
            let dir = out.join("trees");
            std::fs::create_dir_all(&dir).map_err(|e| Error::Data(e.to_string()))?;
            std::fs::write(dir.join(format!("{}.json", v.name)), exp.model_tree.to_json_string())
                .map_err(|e| Error::Data(e.to_string()))?;
        }
        let trained = train(&exp, |_| {})?;
        let vdir = out.join(&v.name);
        std::fs::create_dir_all(&vdir).map_err(|e| Error::Data(e.to_string()))?;
        super::train::save_checkpoint(&vdir.join("model.bin"), &exp, &trained)?;
        for &shots in &v.config.eval.shots {
            progress(&format!("evaluating {} at {shots} shots", v.name));
            let reports = evaluate(&exp, &trained.params, shots)?;
            write_jsonl(&vdir.join(format!("reports_n{shots}.jsonl")), &reports)?;
            let summary = summarize(&v.name, &reports).ok_or_else(|| Error::Data("no evaluation episodes".into()))?;
            write_json(&vdir.join(format!("summary_n{shots}.json")), &summary)?;
            results.push(VariantResult { name: v.name.clone(), shots, best_step: trained.best_step, summary, reports });
        }
    }
    let mut comparisons = Vec::new();
    for r in results.iter().filter(|r| r.name != BASELINE) {
        if let Some(b) = results.iter().find(|b| b.name == BASELINE && b.shots == r.shots) {
            comparisons.push(compare_reports(&r.name, &r.reports, &b.reports));
        }
    }
    let rows: Vec<(String, Vec<EpisodeReport>)> = results.iter().map(|r| (r.name.clone(), r.reports.clone())).collect();
    std::fs::write(out.join("ablation.csv"), reports_csv(&rows)).map_err(|e| Error::Data(e.to_string()))?;
    let report = AblationReport { kind, results, comparisons };
    write_json(&out.join("ablation.json"), &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_counts() {
        let base = ExperimentConfig::default();
        let h = variants(AblationKind::Height, &base, 4);
        let names: Vec<&str> = h.iter().map(|v| v.name.as_str()).collect();
        assert_eq!(names, ["baseline", "height_1", "height_2", "height_3", "height_4"]);
        assert_eq!(variants(AblationKind::Alpha, &base, 4).len(), 6);
        let shots = variants(AblationKind::Shots, &base, 2);
        assert_eq!(shots.len(), 2);
        assert!(shots.iter().all(|v| v.config.eval.shots == SHOTS));
        let trees = variants(AblationKind::RandomTrees, &base, 2);
        assert_eq!(trees.len(), 11);
        let seeds: std::collections::BTreeSet<_> = trees.iter().filter_map(|v| v.config.tree.random_swap_seed).collect();
        assert_eq!(seeds.len(), 10);
        assert_eq!(variants(AblationKind::Loss, &base, 2).len(), 3);
        assert_eq!("random-trees".parse::<AblationKind>().unwrap(), AblationKind::RandomTrees);
        assert!("depth".parse::<AblationKind>().is_err());
    }
}
