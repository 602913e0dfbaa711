use std::path::Path;
use std::process::{Command, Output};

use metaproto::harness::EpisodeReport;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metaproto")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn report(seed: u64, f1: f64) -> EpisodeReport {
    EpisodeReport {
        seed,
        ways: 2,
        shots: 4,
        queries: 5,
        classes: vec!["a".into(), "b".into()],
        macro_f1: f1,
        severity: Some(1.0),
        severity_model_tree: Some(1.0),
        mistakes: 1,
        per_level_ce: vec![0.3],
        confusion: vec![vec![5, 0], vec![1, 4]],
    }
}

fn write_reports(path: &Path, reports: &[EpisodeReport]) {
    let lines: Vec<String> = reports.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
    std::fs::write(path, lines.join("\n")).unwrap();
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&cli(&["train", "--set", "train.lr=-1", "--out", out])), 2);
    assert_eq!(code(&cli(&["train", "--set", "train.nonsense=1", "--out", out])), 2);
    assert_eq!(code(&cli(&["no-such-command"])), 2);
    assert_eq!(code(&cli(&["synth-data", "/no/such/manifest.json", out])), 3);
    assert_eq!(code(&cli(&["evaluate", "--checkpoint", "/no/such/model.bin"])), 3);
}

#[test]
fn split_lists_both_sides() {
    let out = cli(&["split"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let plan: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let text = plan.to_string();
    assert!(text.contains("synth_violin") && text.contains("synth_snare"));
}

#[test]
fn compare_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    write_reports(&a, &(0..8).map(|s| report(s, 0.9 + 0.01 * s as f64)).collect::<Vec<_>>());
    write_reports(&b, &(0..8).map(|s| report(s, 0.8)).collect::<Vec<_>>());

    let out = cli(&["compare", a.to_str().unwrap(), b.to_str().unwrap(), "--alternative", "greater"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let res: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(res["paired_episodes"], 8);
    // all eight differences positive: exact p = 1/256
    assert!((res["p_value"].as_f64().unwrap() - 1.0 / 256.0).abs() < 1e-12);

    let csv = dir.path().join("all.csv");
    let out = cli(&["export-csv", a.to_str().unwrap(), b.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 17);
    assert!(text.lines().nth(1).unwrap().starts_with("a,4,0,"));

    let c = dir.path().join("c.jsonl");
    write_reports(&c, &[report(99, 0.5)]);
    assert_eq!(code(&cli(&["compare", a.to_str().unwrap(), c.to_str().unwrap()])), 3);
}
