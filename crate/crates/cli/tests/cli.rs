use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use respmotion::Codebook;

const TINY: &str = r#"{
  "phantom": {"subjects": 3, "sequences_per_subject": 1, "height": 16, "width": 16, "frames": 16},
  "model": {"base_channels": 2, "lstm_hidden": 2, "decoder_channels": 2},
  "train": {"max_epochs": 2, "windows_per_epoch": 3}
}"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_respmotion"))
        .args(args)
        .env_remove("RESPMOTION_CONFIG")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_deterministic_and_guarded() {
    let ws = Workspace::new();
    let cfg = ws.path("tiny.json");
    let (a, b) = (ws.path("a"), ws.path("b"));
    let summary = ok(&["gen-data", "--config", p(&cfg), "--out", p(&a)]);
    assert!(summary.contains("subjects   3  sequences 3"), "{summary}");
    ok(&["gen-data", "--config", p(&cfg), "--out", p(&b)]);
    assert_eq!(files(&a), files(&b));

    let again = run(&["gen-data", "--config", p(&cfg), "--out", p(&a)]);
    assert_eq!(again.status.code(), Some(3));
    ok(&["gen-data", "--config", p(&cfg), "--out", p(&a), "--force"]);
    assert_eq!(files(&a), files(&b));

    let one = run(&["gen-data", "--config", p(&cfg), "--out", p(&ws.path("c")), "--subjects", "1"]);
    assert_eq!(one.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&one.stderr).contains("at least 3"));
}

#[test]
fn default_cohort_layout() {
    let ws = Workspace::new();
    let out = ws.path("d");
    // Default geometry with fewer frames keeps this quick.
    std::fs::write(ws.path("c.json"), r#"{"phantom": {"frames": 12}}"#).unwrap();
    ok(&["gen-data", "--config", p(&ws.path("c.json")), "--out", p(&out), "--subjects", "12", "--seed", "7"]);
    let subjects: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("subject_"))
        .collect();
    assert_eq!(subjects.len(), 12);
    let sequences: usize = subjects.iter().map(|s| std::fs::read_dir(s.path()).unwrap().count()).sum();
    assert_eq!(sequences, 36);
}

#[test]
fn codebook_bins_and_round_trip() {
    let ws = Workspace::new();
    let data = ws.path("data");
    ok(&["gen-data", "--config", p(&ws.path("tiny.json")), "--out", p(&data)]);
    for (bins, q) in [("5", 25), ("3", 9)] {
        let out = ws.path(&format!("cb{bins}.json"));
        let text = ok(&["codebook", "--data", p(&data), "--held-out", "1", "--bins", bins, "--out", p(&out)]);
        assert!(text.contains(&format!("q={q}")));
        let cb = Codebook::load(&out).unwrap();
        assert_eq!(cb.q, q);
        assert_eq!(cb.to_json().unwrap(), std::fs::read_to_string(&out).unwrap());
    }
    let missing = run(&["codebook", "--data", p(&data), "--held-out", "9", "--out", p(&ws.path("x.json"))]);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn pipeline_round_trip_and_digest_checks() {
    let ws = Workspace::new();
    let data = ws.path("data");
    let cb = ws.path("cb.json");
    ok(&["gen-data", "--config", p(&ws.path("tiny.json")), "--out", p(&data)]);
    ok(&["codebook", "--data", p(&data), "--held-out", "0", "--out", p(&cb)]);
    let model = ws.path("m");
    ok(&["train", "--data", p(&data), "--held-out", "0", "--codebook", p(&cb), "--out", p(&model)]);
    let log = std::fs::read_to_string(model.join("train_log.csv")).unwrap();
    assert!(log.starts_with("# digest="));
    assert_eq!(log.lines().count(), 4);

    let pred = ws.path("pred");
    ok(&[
        "predict", "--data", p(&data), "--codebook", p(&cb), "--model", p(&model.join("model.bin")),
        "--subject", "0", "--start", "2", "--horizon", "3", "--out", p(&pred),
    ]);
    assert_eq!(std::fs::metadata(pred.join("fields.bin")).unwrap().len(), 3 * 2 * 16 * 16 * 4);
    let labels: serde_json::Value = serde_json::from_slice(&std::fs::read(pred.join("labels.json")).unwrap()).unwrap();
    assert_eq!(labels["labels"].as_array().unwrap().len(), 3);

    let eval = ws.path("eval");
    let csv = ok(&[
        "eval", "--data", p(&data), "--held-out", "0", "--codebook", p(&cb), "--model", p(&model.join("model.bin")),
        "--methods", "proposed,oracle,quantized-oracle", "--out", p(&eval),
    ]);
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 1 + 3 * 5);

    let report = ws.path("report");
    let table = ok(&["report", "--inputs", p(&eval), "--out", p(&report)]);
    assert!(table.contains("t=5 (1600 ms)"));
    for f in ["table.csv", "error.svg", "ncc.svg", "trajectories.svg"] {
        assert!(report.join(f).exists(), "{f}");
    }

    // A codebook for another fold, or a config that differs from the dataset's, is refused.
    let other = ws.path("cb1.json");
    ok(&["codebook", "--data", p(&data), "--held-out", "1", "--out", p(&other)]);
    let wrong_fold = run(&["train", "--data", p(&data), "--held-out", "0", "--codebook", p(&other), "--out", p(&ws.path("w"))]);
    assert_eq!(wrong_fold.status.code(), Some(2));
    std::fs::write(ws.path("other.json"), r#"{"train": {"seed": 3}}"#).unwrap();
    let wrong_cfg = run(&[
        "eval", "--config", p(&ws.path("other.json")), "--data", p(&data), "--held-out", "0",
        "--codebook", p(&cb), "--methods", "oracle", "--out", p(&ws.path("e2")),
    ]);
    assert_eq!(wrong_cfg.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&wrong_cfg.stderr).contains("digest"));

    // Reports from different configurations do not merge.
    let mut foreign: serde_json::Value = serde_json::from_slice(&std::fs::read(eval.join("metrics.json")).unwrap()).unwrap();
    foreign["digest"] = "0000".into();
    foreign["held_out"] = serde_json::json!([1]);
    std::fs::write(ws.path("foreign.json"), foreign.to_string()).unwrap();
    let mixed = run(&["report", "--inputs", p(&eval), p(&ws.path("foreign.json")), "--out", p(&ws.path("r2"))]);
    assert_eq!(mixed.status.code(), Some(2));
}

#[test]
fn unknown_config_keys_exit_with_config_error() {
    let ws = Workspace::new();
    std::fs::write(ws.path("bad.json"), r#"{"train": {"lr0": 0.1}}"#).unwrap();
    let out = run(&["gen-data", "--config", p(&ws.path("bad.json")), "--out", p(&ws.path("d"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_path_from_environment() {
    let ws = Workspace::new();
    let out = Command::new(env!("CARGO_BIN_EXE_respmotion"))
        .args(["gen-data", "--out", p(&ws.path("d"))])
        .env("RESPMOTION_CONFIG", ws.path("tiny.json"))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("size 16x16"));
}
