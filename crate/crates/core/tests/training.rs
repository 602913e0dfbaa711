//! Training, checkpointing and evaluation on small in-memory corpora.

mod common;

use std::sync::Arc;

use common::{toy_config, toy_dataset};
use metaproto::harness::commands::restore;
use metaproto::harness::train::load_checkpoint;
use metaproto::harness::{evaluate, save_checkpoint, train, Experiment, LossKind};
use metaproto::tree::ClassTree;
use serde_json::json;

fn four_family_tree() -> ClassTree {
    ClassTree::from_value(&json!({"root": {
        "up": {"A": ["a1", "a2", "a3"], "B": ["b1", "b2", "b3"]},
        "down": {"C": ["c1", "c2", "c3"], "D": ["d1", "d2", "d3"]}
    }}))
    .unwrap()
}

#[test]
fn two_class_toy_loss_decreases() {
    let tree = ClassTree::from_value(&json!({"root": {"A": ["a1", "a2"], "B": ["b1", "b2"]}})).unwrap();
    let data = Arc::new(toy_dataset(tree, 40, 2, 4, 3));
    let mut cfg = toy_config(8);
    cfg.train.ways = 2;
    cfg.train.max_steps = 200;
    cfg.train.val_interval = 200;
    cfg.eval.ways = Some(2);
    let exp = Experiment::with_data(cfg, data).unwrap();
    assert_eq!(exp.train_pool.class_count(), 2);
    let r = train(&exp, |_| {}).unwrap();
    assert_eq!(r.log.len(), 200);
    let last = r.log[199].val_loss.unwrap();
    assert!(last < r.initial_val_loss, "step-200 validation loss {last} not below step-0 {}", r.initial_val_loss);
}

#[test]
fn short_run_writes_a_loadable_checkpoint() {
    let data = Arc::new(toy_dataset(four_family_tree(), 20, 2, 3, 5));
    let mut cfg = toy_config(6);
    cfg.train.max_steps = 10;
    let exp = Experiment::with_data(cfg, data).unwrap();
    let r = train(&exp, |_| {}).unwrap();
    assert!(r.log.len() <= 10);
    assert_eq!(r.log[0].per_level.len(), 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    save_checkpoint(&path, &exp, &r).unwrap();
    let (params, meta) = load_checkpoint(&path).unwrap();
    assert_eq!(params, r.params);
    assert_eq!(meta.split, exp.split);
    assert_eq!(meta.best_step, r.best_step);
}

#[test]
fn evaluation_is_deterministic_across_runs_and_threads() {
    let data = Arc::new(toy_dataset(four_family_tree(), 20, 2, 3, 6));
    let exp = Experiment::with_data(toy_config(6), data).unwrap();
    let r = train(&exp, |_| {}).unwrap();
    let a = evaluate(&exp, &r.params, 2).unwrap();
    let b = evaluate(&exp, &r.params, 2).unwrap();
    assert_eq!(a, b);
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    assert_eq!(one.install(|| evaluate(&exp, &r.params, 2).unwrap()), a);
    assert_eq!(four.install(|| evaluate(&exp, &r.params, 2).unwrap()), a);
    assert_eq!(a.len(), 12);
    for rep in &a {
        assert_eq!(rep.ways, 4);
        assert_eq!(rep.shots, 2);
        assert!((0.0..=1.0).contains(&rep.macro_f1));
        if rep.mistakes == 0 {
            assert_eq!(rep.macro_f1, 1.0);
            assert_eq!(rep.severity, None);
        }
    }
}

#[test]
fn every_loss_kind_trains() {
    let data = Arc::new(toy_dataset(four_family_tree(), 20, 2, 3, 7));
    for kind in [LossKind::Hierarchical, LossKind::FlatBce, LossKind::Protonet] {
        let mut cfg = toy_config(6);
        cfg.loss.kind = kind;
        cfg.train.max_steps = 5;
        let exp = Experiment::with_data(cfg, data.clone()).unwrap();
        let r = train(&exp, |_| {}).unwrap();
        assert!(r.log.iter().all(|s| s.loss.is_finite()), "{kind:?}");
    }
}

#[test]
fn restore_rejects_mismatched_model_and_split() {
    // restore() rebuilds the corpus from config, so use the real synthetic
    // source with heavy pooling and a one-step run.
    let mut cfg = metaproto::harness::ExperimentConfig::default();
    cfg.data.pool = [8, 8];
    cfg.model = metaproto::embedding::BackboneConfig::mlp(&[16 * 15, 8], 0);
    cfg.train.max_steps = 1;
    cfg.train.val_episodes = 1;
    cfg.train.ways = 3;
    cfg.train.shots = 1;
    cfg.train.queries = 1;
    cfg.train.val_queries = 1;
    let exp = Experiment::prepare(cfg).unwrap();
    let r = train(&exp, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    save_checkpoint(&path, &exp, &r).unwrap();

    let (ok, _) = restore(&path, None, &["eval.episodes=3".into()]).unwrap();
    assert_eq!(ok.config.eval.episodes, 3);
    let e = restore(&path, None, &["model.hidden=[4]".into()]).err().unwrap();
    assert_eq!(e.exit_code(), 2);
    let e = restore(&path, None, &["seeds.split=99".into()]).err().unwrap();
    assert_eq!(e.exit_code(), 3);
}
