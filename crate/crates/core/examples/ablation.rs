//! Loss ablation at reduced scale: baseline, hierarchical and flat BCE.
use metaproto::harness::ablation::{run_ablation, AblationKind};
use metaproto::harness::ExperimentConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml");
    let overrides = ["train.max_steps=100".to_string(), "eval.episodes=20".to_string()];
    let cfg = ExperimentConfig::load(Some(path.as_ref()), &overrides)?;
    let out = std::env::temp_dir().join("metaproto-ablation-example");
    let report = run_ablation(AblationKind::Loss, &cfg, &out, |m| eprintln!("{m}"))?;
    for r in &report.results {
        println!("{:<14} F1 {:.4}", r.name, r.summary.f1.mean);
    }
    for c in &report.comparisons {
        println!("{} minus baseline: {:+.4} (p = {:?})", c.variant, c.mean_f1_difference, c.two_sided.as_ref().map(|w| w.p_value));
    }
    println!("outputs in {}", out.display());
    Ok(())
}
