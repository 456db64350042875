use std::path::Path;
use std::process::Command;

use cwcf::eval::{EvalPoint, Frontier, Trace};

fn cwcf(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_cwcf")).args(args).output().unwrap();
    assert!(out.status.success(), "cwcf {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn pipeline_from_generation_to_frontier() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    cwcf(&["gen-synthetic", "--out", p(&d.join("syn")), "--samples", "200", "--seed", "1"]);
    let cfg = d.join("cfg.json");
    std::fs::write(&cfg, r#"{"epoch_length": 10, "epochs": 2, "batch_size": 8, "pretrain_max_epochs": 2}"#).unwrap();
    let (schema, data) = (d.join("syn/schema.json"), d.join("syn/data.jsonl"));
    let common = ["--schema", p(&schema), "--data", p(&data), "--config", p(&cfg)];

    cwcf(&[&["train"][..], &common, &["--lambda", "0.05", "--out", p(&d.join("cw"))]].concat());
    cwcf(&[&["baseline-hmil"][..], &common, &["--out", p(&d.join("full"))]].concat());
    cwcf(&[&["baseline-rs"][..], &common, &["--budget", "3", "--out", p(&d.join("rs"))]].concat());
    cwcf(&[&["pretrain"][..], &common, &["--out", p(&d.join("pre"))]].concat());

    let ckpt = d.join("cw/checkpoint.json");
    let metrics = d.join("all.jsonl");
    let line = cwcf(&["evaluate", "--checkpoint", p(&ckpt), "--data", p(&data), "--split", "test", "--mode", "sampled", "--metrics", p(&metrics)]);
    let point: EvalPoint = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(point.lambda, 0.05, "lambda comes from the run's config");
    assert_eq!(point.samples, 40);

    let mut all = std::fs::read_to_string(&metrics).unwrap();
    for run in ["cw", "full", "rs"] {
        all += &std::fs::read_to_string(d.join(run).join("metrics.jsonl")).unwrap();
    }
    std::fs::write(&metrics, &all).unwrap();
    let frontier_path = d.join("frontier.json");
    cwcf(&["pareto", "--in", p(&metrics), "--out", p(&frontier_path)]);
    let frontier: Frontier = serde_json::from_str(&std::fs::read_to_string(&frontier_path).unwrap()).unwrap();
    assert!(!frontier.points.is_empty());
    assert!(!frontier.warning.is_empty());

    let trace_path = d.join("trace.json");
    cwcf(&["trace", "--checkpoint", p(&ckpt), "--data", p(&data), "--sample-index", "5", "--out", p(&trace_path)]);
    let trace: Trace = serde_json::from_str(&std::fs::read_to_string(&trace_path).unwrap()).unwrap();
    assert_eq!(trace.steps.last().unwrap().action.to_string(), "terminal");
    for s in &trace.steps {
        assert!((s.class_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn bad_arguments_fail_cleanly() {
    let out = Command::new(env!("CARGO_BIN_EXE_cwcf")).args(["evaluate", "--checkpoint", "/nonexistent.json", "--data", "x"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonexistent"));
    let out = Command::new(env!("CARGO_BIN_EXE_cwcf")).args(["evaluate", "--split", "nope"]).output().unwrap();
    assert!(!out.status.success());
}
