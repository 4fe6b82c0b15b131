use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dga(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dga"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = dga(dir, args);
    assert!(
        out.status.success(),
        "dga {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_line(out: &Output) -> Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(stderr.lines().last().unwrap()).unwrap()
}

const SMALL: &[&str] = &[
    "synth", "--factors", "2", "--nodes", "60", "--classes", "3", "--target-degree", "6",
    "--seed", "3", "--out", "syn",
];

const QUICK: &[&str] = &[
    "--set", "epochs=20", "--set", "channels=2", "--set", "channel_dim=4", "--set",
    "eval_every=5", "--quiet",
];

fn train_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["train", "--config", "syn/experiment.cfg"];
    v.extend_from_slice(QUICK);
    v.extend_from_slice(extra);
    v
}

#[test]
fn synth_protocol_degree_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "synth", "--factors", "4", "--nodes", "1000", "--classes", "16", "--q", "3e-5",
        "--target-degree", "40", "--seed", "7", "--out", "s",
    ];
    ok(dir.path(), &args);
    let m: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("s/manifest.json")).unwrap())
            .unwrap();
    let deg = m["mean_degree"].as_f64().unwrap();
    assert!((deg - 40.0).abs() <= 2.0, "mean degree {deg}");
    assert!(m["p"].as_f64().unwrap() > 0.0);
    let labels = fs::read_to_string(dir.path().join("s/labels.txt")).unwrap();
    assert_eq!(labels.lines().next().unwrap().split_whitespace().count(), 5);
}

#[test]
fn synth_is_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), SMALL);
    let first: Vec<Vec<u8>> = ["edges.txt", "features.txt", "labels.txt", "manifest.json"]
        .iter()
        .map(|f| fs::read(dir.path().join("syn").join(f)).unwrap())
        .collect();
    ok(dir.path(), SMALL);
    for (f, bytes) in ["edges.txt", "features.txt", "labels.txt", "manifest.json"]
        .iter()
        .zip(first)
    {
        assert_eq!(fs::read(dir.path().join("syn").join(f)).unwrap(), bytes, "{f}");
    }
}

#[test]
fn synth_without_edges() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "synth", "--factors", "1", "--nodes", "30", "--classes", "3", "--q", "0",
            "--target-degree", "0", "--out", "e",
        ],
    );
    assert_eq!(fs::read_to_string(dir.path().join("e/edges.txt")).unwrap(), "");
}

#[test]
fn train_eval_summarize() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, SMALL);
    ok(d, &train_args(&["--set", "out_dir=run"]));
    for f in ["checkpoint.txt", "last.txt", "config.cfg", "history.jsonl", "history.csv"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let history = fs::read_to_string(d.join("run/history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 20);

    let stdout = ok(
        d,
        &["eval", "--run", "run", "--tasks", "linkpred,cluster,correlation"],
    );
    let records: Vec<Value> = stdout
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    // linkpred, three label views, correlation
    assert_eq!(records.len(), 5);
    assert!(records[0]["metrics"]["auc"].is_f64());
    assert!(records[0]["metrics"]["ap"].is_f64());
    for r in &records[1..4] {
        for m in ["acc", "precision", "f1", "nmi", "ari"] {
            assert!(r["metrics"][m].is_f64(), "{m}");
        }
    }
    assert!(records[4]["metrics"]["block_ratio"].is_number());
    assert!(records.iter().all(|r| r["schema_version"] == 1));
    let corr = fs::read_to_string(d.join("run/correlation.csv")).unwrap();
    assert_eq!(corr.lines().count(), 8);

    let csv = ok(d, &["summarize", "run/metrics.jsonl"]);
    assert!(csv.starts_with("task,config_hash,mode,label_view,metric,runs,mean,stderr"));
    assert!(csv.lines().any(|l| l.starts_with("linkpred,") && l.contains(",auc,1,")));
}

#[test]
fn training_is_reproducible_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, SMALL);
    ok(d, &train_args(&["--set", "out_dir=a", "--set", "mode=DVGA"]));
    ok(d, &train_args(&["--set", "out_dir=b", "--set", "mode=DVGA"]));
    for f in ["checkpoint.txt", "history.jsonl"] {
        assert_eq!(
            fs::read(d.join("a").join(f)).unwrap(),
            fs::read(d.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn flow_ablation_from_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, SMALL);
    ok(
        d,
        &train_args(&["--set", "mode=DVGA", "--set", "flow_steps=0", "--set", "out_dir=r"]),
    );
    let ckpt = fs::read_to_string(d.join("r/checkpoint.txt")).unwrap();
    assert!(ckpt.contains("flow_steps = 0"));
    assert!(!ckpt.contains("flow0"));
}

#[test]
fn unknown_keys_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, SMALL);
    let out = dga(d, &train_args(&["--set", "lamda=0.1", "--set", "chanels=2"]));
    let e = error_line(&out);
    assert_eq!(e["error"], "config");
    let msg = e["message"].as_str().unwrap();
    assert!(msg.contains("lamda") && msg.contains("chanels"), "{msg}");
}

#[test]
fn invalid_values_are_listed_together() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, SMALL);
    let out = dga(d, &train_args(&["--set", "channels=0", "--set", "lr=-1"]));
    let msg = error_line(&out)["message"].as_str().unwrap().to_string();
    assert!(msg.contains("channels") && msg.contains("lr"), "{msg}");
}

#[test]
fn eval_rejects_feature_dimension_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, SMALL);
    ok(d, &train_args(&["--set", "out_dir=run"]));
    let cfg = fs::read_to_string(d.join("run/config.cfg")).unwrap();
    let cfg = cfg.replace(
        "feature_source = train_adjacency",
        "feature_source = file\nfeatures = syn/labels.txt",
    );
    fs::write(d.join("run/config.cfg"), cfg).unwrap();
    let e = error_line(&dga(d, &["eval", "--run", "run"]));
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("input features"));
}

#[test]
fn missing_files_fail_with_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let e = error_line(&dga(dir.path(), &["train", "--config", "nope.cfg"]));
    assert_eq!(e["error"], "io");
}

#[test]
fn sweep_runs_grid_in_parallel_and_summarizes_over_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, SMALL);
    ok(
        d,
        &[
            "sweep", "--config", "syn/experiment.cfg", "--set", "epochs=10", "--set",
            "channel_dim=4", "--axis", "channels=1,2", "--axis", "seed=0,1", "--jobs", "2",
            "--root", "sw",
        ],
    );
    let csv = fs::read_to_string(d.join("sw/summary.csv")).unwrap();
    let auc_rows: Vec<&str> = csv.lines().filter(|l| l.contains(",auc,")).collect();
    assert_eq!(auc_rows.len(), 2, "{csv}");
    assert!(auc_rows.iter().all(|l| l.contains(",auc,2,")));
}

#[test]
fn linqs_conversion() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("x.content"),
        "p1 1 0 1 Theory\np2 0 1 0 AI\np3 1 1 0 Theory\n",
    )
    .unwrap();
    fs::write(d.join("x.cites"), "p1 p2\np2 p3\np3 p1\np1 ghost\n").unwrap();
    let stdout = ok(
        d,
        &["linqs", "--content", "x.content", "--cites", "x.cites", "--out", "g"],
    );
    assert!(stdout.contains("3 nodes, 3 edges, 3 features"), "{stdout}");
    assert_eq!(
        fs::read_to_string(d.join("g/features.txt")).unwrap().lines().count(),
        3
    );
}

#[test]
fn keys_lists_every_key_with_a_default() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["keys"]);
    for k in ["mode", "channels", "channel_dim", "lambda", "epochs", "edges", "out_dir"] {
        assert!(out.lines().any(|l| l.starts_with(&format!("{k} = "))), "{k}");
    }
    assert!(out.contains("channel_dim = 16"));
    assert!(out.contains("epochs = 3000"));
}
