//! Implementations behind the command-line subcommands. Each returns the
//! text to print so the binary stays a thin argument parser.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::ablation::{reports_csv, run_ablation, write_json, write_jsonl, AblationKind};
use super::config::ExperimentConfig;
use super::data::{corpus_outline, Experiment};
use super::evaluate::{evaluate, summarize, EpisodeReport};
use super::train::{load_checkpoint, save_checkpoint, train, StepRecord};
use super::wilcoxon::{wilcoxon_signed_rank, Alternative};
use crate::embedding::init_params;
use crate::episodes::build_split;
use crate::error::{Error, Result};
use crate::features::audio_io::write_wav;
use crate::features::SynthManifest;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Data(format!("{}: {e}", path.display()))
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

/// Render every clip of a manifest to `<out>/<leaf>/<leaf>-NNN.wav` and write
/// the manifest's tree beside them.
pub fn synth_data(manifest: &str, out: &Path) -> Result<String> {
    let m = SynthManifest::load(manifest)?;
    let tree = m.tree()?;
    std::fs::create_dir_all(out).map_err(io(out))?;
    let mut written = 0;
    for (li, leaf) in m.leaves.iter().enumerate() {
        let dir = out.join(&leaf.name);
        std::fs::create_dir_all(&dir).map_err(io(&dir))?;
        for ci in 0..m.clips_per_leaf {
            let clip = m.render_clip(li, ci)?;
            write_wav(&dir.join(format!("{}.wav", clip.source)), &clip)?;
            written += 1;
        }
    }
    let tree_path = out.join("tree.json");
    std::fs::write(&tree_path, tree.to_json_string()).map_err(io(&tree_path))?;
    Ok(format!("wrote {written} clips for {} leaves to {}", m.leaves.len(), out.display()))
}

/// The family-balanced leaf split for the configured corpus, as JSON.
pub fn split(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<String> {
    let (_, families) = corpus_outline(cfg)?;
    let plan = build_split(&families, cfg.data.train_fraction, cfg.seeds.split)?;
    let text = pretty(&plan);
    if let Some(path) = out {
        std::fs::write(path, &text).map_err(io(path))?;
    }
    Ok(text)
}

/// Train and write `model.bin`, its manifest, `config.json` and `train_log.jsonl`.
pub fn train_cmd(cfg: ExperimentConfig, out: &Path, mut progress: impl FnMut(&StepRecord)) -> Result<String> {
    let exp = Experiment::prepare(cfg)?;
    std::fs::create_dir_all(out).map_err(io(out))?;
    write_json(&out.join("config.json"), &exp.config)?;
    let result = train(&exp, |r| progress(r))?;
    save_checkpoint(&out.join("model.bin"), &exp, &result)?;
    write_jsonl(&out.join("train_log.jsonl"), &result.log)?;
    Ok(format!(
        "trained {} steps{}; best validation loss {:.6} at step {}; checkpoint {}",
        result.steps_run,
        if result.stopped_early { " (early stop)" } else { "" },
        result.best_val_loss,
        result.best_step,
        out.join("model.bin").display()
    ))
}

/// Load a checkpoint and rebuild its experiment. An explicit config file or
/// overrides are layered over the stored config; the model must still match
/// the checkpoint and the split must be unchanged.
pub fn restore(checkpoint: &Path, config: Option<&Path>, overrides: &[String]) -> Result<(Experiment, crate::autodiff::Params)> {
    let (params, meta) = load_checkpoint(checkpoint)?;
    let cfg = meta.config.layered(config, overrides)?;
    if cfg.model != meta.config.model {
        return Err(Error::Config("model config does not match the checkpoint".into()));
    }
    let fresh = init_params(&cfg.model)?;
    let shapes = |p: &crate::autodiff::Params| -> BTreeMap<String, Vec<usize>> {
        p.trainable.iter().chain(&p.buffers).map(|(k, t)| (k.clone(), t.shape().to_vec())).collect()
    };
    if shapes(&fresh) != shapes(&params) {
        return Err(Error::Config("checkpoint arrays do not match the backbone config".into()));
    }
    let mut exp = Experiment::prepare(cfg)?;
    if exp.split != meta.split {
        return Err(Error::Data("evaluation split differs from the checkpoint's split".into()));
    }
    exp.stats = meta.stats;
    Ok((exp, params))
}

/// Evaluate at every configured shot count, writing JSONL reports and summaries.
pub fn evaluate_cmd(exp: &Experiment, params: &crate::autodiff::Params, out: &Path) -> Result<String> {
    std::fs::create_dir_all(out).map_err(io(out))?;
    let mut lines = Vec::new();
    for &shots in &exp.config.eval.shots {
        let reports = evaluate(exp, params, shots)?;
        write_jsonl(&out.join(format!("reports_n{shots}.jsonl")), &reports)?;
        let summary = summarize(&exp.config.name, &reports).ok_or_else(|| Error::Data("no evaluation episodes".into()))?;
        write_json(&out.join(format!("summary_n{shots}.json")), &summary)?;
        lines.push(format!(
            "N={shots}: {} episodes, mean F1 {:.4} (median {:.4}), mean severity {}",
            summary.episodes,
            summary.f1.mean,
            summary.f1.median,
            summary.severity.as_ref().map_or("n/a".to_string(), |d| format!("{:.4}", d.mean))
        ));
    }
    Ok(lines.join("\n"))
}

pub fn ablate(kind: AblationKind, cfg: &ExperimentConfig, out: &Path, progress: impl FnMut(&str)) -> Result<String> {
    let report = run_ablation(kind, cfg, out, progress)?;
    let mut lines = vec![format!("{:<18} {:>5} {:>9} {:>9}", "variant", "shots", "mean_f1", "severity")];
    for r in &report.results {
        lines.push(format!(
            "{:<18} {:>5} {:>9.4} {:>9}",
            r.name,
            r.shots,
            r.summary.f1.mean,
            r.summary.severity.as_ref().map_or("n/a".to_string(), |d| format!("{:.4}", d.mean))
        ));
    }
    for c in &report.comparisons {
        let p = |w: &Option<super::wilcoxon::WilcoxonResult>| w.as_ref().map_or("n/a".to_string(), |w| format!("{:.4}", w.p_value));
        lines.push(format!(
            "{} vs baseline (N={}): dF1 {:+.4}, two-sided p {}, one-sided p {}",
            c.variant,
            c.shots,
            c.mean_f1_difference,
            p(&c.two_sided),
            p(&c.greater)
        ));
    }
    Ok(lines.join("\n"))
}

pub fn read_reports(path: &Path) -> Result<Vec<EpisodeReport>> {
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

#[derive(Debug, Serialize)]
pub struct CompareOutput {
    pub paired_episodes: usize,
    pub mean_f1_a: f64,
    pub mean_f1_b: f64,
    pub alternative: Alternative,
    pub statistic: f64,
    pub p_value: f64,
    pub n_effective: usize,
    pub method: super::wilcoxon::Method,
}

/// Wilcoxon signed-rank test on per-episode F1, pairing reports by episode seed.
pub fn compare(a: &Path, b: &Path, alt: Alternative) -> Result<String> {
    let ra = read_reports(a)?;
    let rb: BTreeMap<(u64, usize), f64> = read_reports(b)?.into_iter().map(|r| ((r.seed, r.shots), r.macro_f1)).collect();
    let mut fa = Vec::new();
    let mut fb = Vec::new();
    for r in &ra {
        if let Some(&f) = rb.get(&(r.seed, r.shots)) {
            fa.push(r.macro_f1);
            fb.push(f);
        }
    }
    if fa.is_empty() {
        return Err(Error::Data("the two report files share no episode seeds".into()));
    }
    let w = wilcoxon_signed_rank(&fa, &fb, alt)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(pretty(&CompareOutput {
        paired_episodes: fa.len(),
        mean_f1_a: mean(&fa),
        mean_f1_b: mean(&fb),
        alternative: alt,
        statistic: w.statistic,
        p_value: w.p_value,
        n_effective: w.n_effective,
        method: w.method,
    }))
}

/// Label for a report file: its parent directory for `reports_n*.jsonl`,
/// otherwise the file stem.
fn report_label(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("reports");
    match path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()) {
        Some(dir) if stem.starts_with("reports") => dir.to_string(),
        _ => stem.to_string(),
    }
}

/// One CSV of per-episode rows from any number of report files.
pub fn export_csv(inputs: &[PathBuf], out: Option<&Path>) -> Result<String> {
    let rows = inputs
        .iter()
        .map(|p| Ok((report_label(p), read_reports(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let csv = reports_csv(&rows);
    match out {
        Some(path) => {
            std::fs::write(path, &csv).map_err(io(path))?;
            Ok(format!("wrote {} rows to {}", csv.lines().count() - 1, path.display()))
        }
        None => Ok(csv.trim_end().to_string()),
    }
}
