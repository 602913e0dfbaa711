//! Episodic training loop with validation-based early stopping.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::LossKind;
use super::data::{Experiment, MelStats};
use crate::autodiff::{adam_step, checkpoint, AdamConfig, AdamState, Bound, Graph, Params, Var};
use crate::embedding::{embed, init_params, update_running_stats, Mode};
use crate::episodes::{sample_episode, Episode, EpisodeShape};
use crate::error::{Error, Result};
use crate::protonet::{flat_bce_loss, hierarchical_loss, level_logits, protonet_loss, prototype_levels, EpisodePlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub per_level: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Parameters at the best validation loss.
    pub params: Params,
    pub best_step: usize,
    pub best_val_loss: f64,
    /// Validation loss of the initial parameters.
    pub initial_val_loss: f64,
    pub steps_run: usize,
    pub stopped_early: bool,
    pub log: Vec<StepRecord>,
}

/// One episode's loss: the tape, its loss node and the values read off it.
pub struct EpisodeLoss {
    pub graph: Graph,
    pub loss: Var,
    pub bound: Bound,
    pub total: f64,
    pub per_level: Vec<f64>,
}

/// Forward one episode through backbone and loss. In train mode the
/// parameters are bound as inputs and BN running statistics are updated.
pub fn episode_loss(exp: &Experiment, params: &mut Params, episode: &Episode, mode: Mode) -> Result<EpisodeLoss> {
    let cfg = &exp.config;
    let (sup, _) = episode.support_flat();
    let (qry, _) = episode.query_flat();
    let mut ids = sup.clone();
    ids.extend(&qry);
    let plan = EpisodePlan::new(&exp.model_tree, &exp.leaf_ids(&sup)?, &exp.leaf_ids(&qry)?)?;

    let mut g = Graph::new();
    let bound = if mode == Mode::Train { params.bind(&mut g) } else { params.bind_frozen(&mut g) };
    let x = g.constant(exp.batch(&ids));
    let emb = embed(&cfg.model, params, &bound, &mut g, x, mode)?;
    let s = g.slice_rows(emb.output, 0, sup.len())?;
    let q = g.slice_rows(emb.output, sup.len(), ids.len())?;
    let terms = match cfg.loss.kind {
        LossKind::Protonet => protonet_loss(&mut g, s, q, &plan, cfg.loss.distance)?,
        kind => {
            let protos = prototype_levels(&mut g, &plan, s)?;
            let logits = level_logits(&mut g, q, &protos, cfg.loss.distance)?;
            if kind == LossKind::FlatBce {
                flat_bce_loss(&mut g, &logits, &plan)?
            } else {
                hierarchical_loss(&mut g, &logits, &plan, cfg.loss.alpha)?
            }
        }
    };
    if mode == Mode::Train {
        update_running_stats(params, &g, &emb);
    }
    let total = g.value(terms.total).item();
    let per_level = terms.per_level.iter().map(|&v| g.value(v).item()).collect();
    Ok(EpisodeLoss { graph: g, loss: terms.total, bound, total, per_level })
}

/// Shape of the fixed validation episodes, shrunk to what the pool holds.
pub fn validation_shape(exp: &Experiment) -> Result<EpisodeShape> {
    let t = &exp.config.train;
    let ways = t.ways.min(exp.val_pool.class_count());
    let smallest = exp.val_pool.members.iter().map(|m| m.len()).min().unwrap_or(0);
    if smallest <= t.shots {
        return Err(Error::Data(format!(
            "validation pool has a class with {smallest} patches; need more than {} shots",
            t.shots
        )));
    }
    Ok(EpisodeShape::new(ways, t.shots, t.val_queries.min(smallest - t.shots)))
}

/// Mean loss over the fixed validation episodes, backbone in eval mode.
pub fn validation_loss(exp: &Experiment, params: &Params, episodes: &[Episode]) -> Result<f64> {
    let mut p = params.clone();
    let mut sum = 0.0;
    for ep in episodes {
        sum += episode_loss(exp, &mut p, ep, Mode::Eval)?.total;
    }
    Ok(sum / episodes.len() as f64)
}

pub fn initial_params(exp: &Experiment) -> Result<Params> {
    let mut model = exp.config.model.clone();
    model.seed = exp.config.seeds.init;
    Ok(init_params(&model)?)
}

/// Train from the configured initialization. `on_record` sees every step.
pub fn train(exp: &Experiment, mut on_record: impl FnMut(&StepRecord)) -> Result<TrainResult> {
    exp.check_input_shape()?;
    let cfg = &exp.config;
    let t = &cfg.train;
    let shape = EpisodeShape::new(t.ways, t.shots, t.queries);
    let val_shape = validation_shape(exp)?;
    let val_eps: Vec<Episode> = (0..t.val_episodes)
        .map(|j| sample_episode(&exp.val_pool, val_shape, cfg.seeds.validation.wrapping_add(j as u64)))
        .collect::<std::result::Result<_, _>>()?;

    let mut params = initial_params(exp)?;
    let adam = AdamConfig::with_lr(t.lr);
    let mut state = AdamState::default();
    let initial_val_loss = validation_loss(exp, &params, &val_eps)?;
    let mut best = (initial_val_loss, 0usize, params.clone());
    let mut log = Vec::new();
    let mut stopped_early = false;
    let mut steps_run = 0;

    for step in 0..t.max_steps {
        let ep = sample_episode(&exp.train_pool, shape, cfg.seeds.episodes.wrapping_add(step as u64))?;
        let mut l = episode_loss(exp, &mut params, &ep, Mode::Train)?;
        if !l.total.is_finite() {
            return Err(Error::Numeric { step, msg: format!("training loss is {}", l.total) });
        }
        l.graph.backward(l.loss)?;
        let grads = l.bound.grads(&l.graph);
        if grads.values().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Numeric { step, msg: "non-finite gradient".into() });
        }
        adam_step(&mut params, &grads, &mut state, &adam)?;
        steps_run = step + 1;

        let validate = steps_run % t.val_interval == 0 || steps_run == t.max_steps;
        let val_loss = if validate { Some(validation_loss(exp, &params, &val_eps)?) } else { None };
        let record = StepRecord { step, loss: l.total, per_level: l.per_level, val_loss };
        on_record(&record);
        log.push(record);
        if let Some(v) = val_loss {
            if !v.is_finite() {
                return Err(Error::Numeric { step, msg: format!("validation loss is {v}") });
            }
            if v < best.0 {
                best = (v, steps_run, params.clone());
            } else if steps_run - best.1 >= t.patience {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainResult {
        params: best.2,
        best_step: best.1,
        best_val_loss: best.0,
        initial_val_loss,
        steps_run,
        stopped_early,
        log,
    })
}

/// Metadata stored beside the checkpoint arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: super::config::ExperimentConfig,
    pub stats: MelStats,
    pub split: crate::episodes::SplitPlan,
    pub model_tree: serde_json::Value,
    pub best_step: usize,
    pub best_val_loss: f64,
    pub steps_run: usize,
}

pub fn save_checkpoint(path: &Path, exp: &Experiment, result: &TrainResult) -> Result<()> {
    let meta = CheckpointMeta {
        config: exp.config.clone(),
        stats: exp.stats.clone(),
        split: exp.split.clone(),
        model_tree: exp.model_tree.to_value(),
        best_step: result.best_step,
        best_val_loss: result.best_val_loss,
        steps_run: result.steps_run,
    };
    let meta = serde_json::to_value(meta).map_err(|e| Error::Data(e.to_string()))?;
    checkpoint::save(&result.params, meta, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Params, CheckpointMeta)> {
    let (params, manifest) = checkpoint::load(path)?;
    let meta: CheckpointMeta =
        serde_json::from_value(manifest.meta).map_err(|e| Error::Data(format!("{}: checkpoint metadata: {e}", path.display())))?;
    Ok((params, meta))
}
