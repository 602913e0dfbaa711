//! Train a small model on the synthetic corpus and evaluate it.
//! Extra arguments are config overrides, e.g. `train.max_steps=100`.
use metaproto::harness::{evaluate, summarize, train, Experiment, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml");
    let mut cfg = ExperimentConfig::load(Some(path.as_ref()), &[])?;
    cfg.train.max_steps = 150;
    cfg.eval.episodes = 20;
    let cfg = cfg.layered(None, &overrides)?;

    let exp = Experiment::prepare(cfg)?;
    println!("train leaves {:?}", exp.split.train());
    let result = train(&exp, |s| {
        if let Some(v) = s.val_loss {
            println!("step {:>4} loss {:.4} val {v:.4}", s.step + 1, s.loss);
        }
    })?;
    println!("best step {} (val {:.4})", result.best_step, result.best_val_loss);
    let reports = evaluate(&exp, &result.params, exp.config.eval.shots[0])?;
    let s = summarize(&exp.config.name, &reports).unwrap();
    println!("{} episodes: mean F1 {:.4}, severity {:?}", s.episodes, s.f1.mean, s.severity.map(|d| d.mean));
    Ok(())
}
