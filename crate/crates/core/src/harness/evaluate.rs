//! Episode-level evaluation on the held-out leaves.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::Experiment;
use super::metrics::{confusion, macro_f1_from_confusion, mistake_severity, Distribution};
use crate::autodiff::{Params, Tensor};
use crate::embedding::embed_values;
use crate::episodes::{episode_stream, Episode, EpisodeShape};
use crate::error::{Error, Result};
use crate::protonet::{classify, hierarchical_loss_values, PrototypeHierarchy};
use crate::tree::NodeId;

/// Patches embedded per backbone call.
const EMBED_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub seed: u64,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub classes: Vec<String>,
    /// Macro F1 of the leaf-level predictions.
    pub macro_f1: f64,
    /// Mean LCA height of the mistakes in the severity tree; absent without mistakes.
    pub severity: Option<f64>,
    /// The same, measured in the model's own tree.
    pub severity_model_tree: Option<f64>,
    pub mistakes: usize,
    /// Query-averaged `-log p(true node)` per level of the model tree.
    pub per_level_ce: Vec<f64>,
    /// `confusion[true][predicted]`, indices into `classes`.
    pub confusion: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub label: String,
    pub shots: usize,
    pub episodes: usize,
    pub f1: Distribution,
    /// Over episodes that had at least one mistake.
    pub severity: Option<Distribution>,
}

pub fn summarize(label: &str, reports: &[EpisodeReport]) -> Option<Summary> {
    let f1: Vec<f64> = reports.iter().map(|r| r.macro_f1).collect();
    let sev: Vec<f64> = reports.iter().filter_map(|r| r.severity).collect();
    Some(Summary {
        label: label.to_string(),
        shots: reports.first()?.shots,
        episodes: reports.len(),
        f1: Distribution::of(&f1)?,
        severity: Distribution::of(&sev),
    })
}

/// Episode geometry for evaluation with `shots` supports per class.
pub fn eval_shape(exp: &Experiment, shots: usize) -> EpisodeShape {
    let available = exp.eval_pool.class_count();
    let ways = exp.config.eval.ways.unwrap_or(12).min(available);
    EpisodeShape::new(ways, shots, exp.config.eval.queries)
}

/// The matched evaluation stream: identical for every model on the same split.
pub fn eval_episodes(exp: &Experiment, shots: usize) -> Result<Vec<Episode>> {
    Ok(episode_stream(&exp.eval_pool, eval_shape(exp, shots), exp.config.eval.episodes, exp.config.seeds.eval)?)
}

/// Eval-mode embeddings of every evaluation patch. The backbone in eval mode
/// treats rows independently, so embedding once and indexing per episode
/// gives the same result as embedding each episode's batch.
pub fn embed_pool(exp: &Experiment, params: &Params) -> Result<BTreeMap<usize, Vec<f64>>> {
    let ids: Vec<usize> = exp.eval_pool.members.iter().flatten().copied().collect();
    let chunks: Vec<Vec<(usize, Vec<f64>)>> = ids
        .par_chunks(EMBED_CHUNK)
        .map(|chunk| {
            let out = embed_values(&exp.config.model, params, &exp.batch(chunk))?;
            Ok(chunk.iter().enumerate().map(|(i, &id)| (id, out.row(i).to_vec())).collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

pub fn evaluate_episode(exp: &Experiment, embeddings: &BTreeMap<usize, Vec<f64>>, ep: &Episode) -> Result<EpisodeReport> {
    let (sup, _) = ep.support_flat();
    let (qry, _) = ep.query_flat();
    let rows: Vec<Vec<f64>> = sup.iter().map(|i| embeddings[i].clone()).collect();
    let support = Tensor::from_rows(&rows)?;
    let sup_leaves = exp.leaf_ids(&sup)?;
    let hier = PrototypeHierarchy::build(&support, &sup_leaves, &exp.model_tree, exp.config.loss.distance)?;

    let classes: Vec<NodeId> = ep.classes.iter().map(|c| exp.model_tree.leaf(c).expect("checked leaf")).collect();
    let truths = exp.leaf_ids(&qry)?;
    let mut preds = Vec::with_capacity(qry.len());
    let mut ce = vec![0.0; hier.levels.len()];
    for (&q, &truth) in qry.iter().zip(&truths) {
        let query = &embeddings[&q];
        preds.push(classify(query, &hier)?[0]);
        let path = exp.model_tree.ancestors(truth)?;
        let (_, levels) = hierarchical_loss_values(&hier.distributions(query)?, &path, exp.config.loss.alpha)?;
        ce.iter_mut().zip(levels).for_each(|(a, b)| *a += b);
    }
    ce.iter_mut().for_each(|v| *v /= qry.len() as f64);

    let conf = confusion(&preds, &truths, &classes)?;
    let to_sev = |ids: &[NodeId]| -> Vec<NodeId> {
        ids.iter()
            .map(|&n| exp.severity_tree.leaf(&exp.model_tree.node(n).name).expect("checked leaf"))
            .collect()
    };
    Ok(EpisodeReport {
        seed: ep.seed,
        ways: ep.classes.len(),
        shots: ep.support[0].len(),
        queries: ep.query[0].len(),
        classes: ep.classes.clone(),
        macro_f1: macro_f1_from_confusion(&conf),
        severity: mistake_severity(&to_sev(&preds), &to_sev(&truths), &exp.severity_tree)?,
        severity_model_tree: mistake_severity(&preds, &truths, &exp.model_tree)?,
        mistakes: preds.iter().zip(&truths).filter(|(p, t)| p != t).count(),
        per_level_ce: ce,
        confusion: conf,
    })
}

/// Reports for every episode of the matched stream, in stream order. The
/// result does not depend on the number of worker threads.
pub fn evaluate(exp: &Experiment, params: &Params, shots: usize) -> Result<Vec<EpisodeReport>> {
    exp.check_input_shape()?;
    let episodes = eval_episodes(exp, shots)?;
    let embeddings = embed_pool(exp, params)?;
    if embeddings.values().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric { step: 0, msg: "non-finite embedding".into() });
    }
    episodes.par_iter().map(|ep| evaluate_episode(exp, &embeddings, ep)).collect()
}
