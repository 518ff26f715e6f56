use std::path::Path;
use std::process::{Command, Output};

use ctg_core::{ExperimentConfig, SegmentationMode};
use serde_json::Value;

fn ctg(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctg"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = ctg(args, dir);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn tiny_config(dir: &Path) -> ExperimentConfig {
    std::fs::write(dir.join("synth.json"), r#"{"videos": 30, "seed": 2, "video_dim": 8}"#).unwrap();
    ok(&["generate", "--config", "synth.json", "--out", "data"], dir);
    ExperimentConfig {
        word_dim: 8,
        feature_dim: 8,
        embed_dim: 8,
        pos_dim: 4,
        phi_hidden: 8,
        video_dim: 8,
        video_hidden: 8,
        attention_hidden: 8,
        max_epochs: 1,
        batch_size: 16,
        mode: SegmentationMode::Parser,
        modalities: vec!["rgb".into()],
        train_path: Some("data/train.jsonl".into()),
        val_path: Some("data/val.jsonl".into()),
        test_path: Some("data/test.jsonl".into()),
        ..ExperimentConfig::default()
    }
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn ablate_writes_seven_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("exp.json"), tiny_config(dir).to_json()).unwrap();
    ok(&["ablate", "--config", "exp.json", "--out", "abl"], dir);
    let table = read_json(&dir.join("abl/ablation.json"));
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 7);
    assert_eq!(rows.last().unwrap()["variant"], "full");
    assert_eq!(table["evaluated_on"], "test");
    let csv = std::fs::read_to_string(dir.join("abl/ablation.csv")).unwrap();
    assert!(csv.lines().count() > 7);
}

#[test]
fn train_ground_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("exp.json"), tiny_config(dir).to_json()).unwrap();
    ok(&["train", "--config", "exp.json", "--out", "run"], dir);
    for f in ["checkpoint.ctgp", "config.json", "train_log.json"] {
        assert!(dir.join("run").join(f).exists(), "{f}");
    }
    ok(&["ground", "--checkpoint", "run/checkpoint.ctgp", "--dataset", "data/test.jsonl", "--out", "preds.jsonl"], dir);
    let preds = std::fs::read_to_string(dir.join("preds.jsonl")).unwrap();
    let tests = std::fs::read_to_string(dir.join("data/test.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), tests.lines().count());
    let first: Value = serde_json::from_str(preds.lines().next().unwrap()).unwrap();
    let n = first["ranked_segments"].as_array().unwrap().len();
    assert_eq!(first["scores"].as_array().unwrap().len(), n);
    let t = (1..n + 1).find(|t| t * (t + 1) / 2 >= n).unwrap();
    assert_eq!(t * (t + 1) / 2, n);

    let out = ok(&["eval", "--predictions", "preds.jsonl", "--dataset", "data/test.jsonl", "--report", "rep.json"], dir);
    let report = read_json(&dir.join("rep.json"));
    let r1 = report["average"]["r1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&r1));
    assert!(report["prior"].is_object());
    assert!(dir.join("rep.csv").exists());
    assert!(String::from_utf8_lossy(&out.stdout).contains("average"));
}

#[test]
fn segment_reads_trees_and_writes_masks() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let lines = [
        r#"{"id": "a", "tokens": ["he", "sits", "before", "he", "falls"], "ptb": "(S (S (NP (PRP he)) (VP (VBZ sits))) (SBAR (IN before) (S (NP (PRP he)) (VP (VBZ falls)))))"}"#,
        r#"{"id": "b", "tree": "(NP (DT a) (NN dog))"}"#,
    ];
    std::fs::write(dir.join("q.jsonl"), lines.join("\n")).unwrap();
    ok(&["segment", "--dataset", "q.jsonl", "--out", "m.jsonl"], dir);
    let got: Vec<Value> = std::fs::read_to_string(dir.join("m.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(got[0]["id"], "a");
    assert_eq!(got[0]["masks"], serde_json::json!([[1, 1, 0, 0, 0], [0, 0, 0, 1, 1]]));
    assert_eq!(got[1]["masks"], serde_json::json!([[1, 1]]));

    let stdout = ok(&["segment", "--dataset", "q.jsonl"], dir).stdout;
    assert_eq!(String::from_utf8(stdout).unwrap().lines().count(), 2);

    std::fs::write(dir.join("bad.jsonl"), r#"{"id": "c", "tokens": ["x"], "ptb": "(S (NN a) (NN b))"}"#).unwrap();
    let out = ctg(&["segment", "--dataset", "bad.jsonl"], dir);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("c"));
}

#[test]
fn adapt_output_is_a_loadable_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::create_dir(dir.join("feats")).unwrap();
    for m in ["rgb", "flow"] {
        let rows = (0..6).map(|c| vec![c as f32; 4]).collect();
        ctg_core::video_repr::ClipFeatures::new("v1", rows)
            .unwrap()
            .write_binary(dir.join(format!("feats/v1.{m}.bin")))
            .unwrap();
    }
    let ann = r#"[{"annotation_id": 1, "video": "v1", "description": "a dog runs", "times": [[1, 2], [1, 2], [0, 3], [1, 2]]},
                  {"annotation_id": 2, "video": "v1", "description": "a cat sits", "times": [[0, 9]]}]"#;
    std::fs::write(dir.join("ann.json"), ann).unwrap();
    ok(&["adapt", "--annotations", "ann.json", "--features-dir", "feats", "--out", "d.jsonl"], dir);
    let summary = read_json(&dir.join("d.summary.json"));
    assert_eq!(summary["kept"], 1);
    assert_eq!(summary["skipped_out_of_range"], 1);
    let opts = ctg_core::LoadOptions {
        modalities: vec!["rgb".into(), "flow".into()],
        require_trees: false,
    };
    let ds = ctg_core::load_dataset(dir.join("d.jsonl"), &opts).unwrap();
    assert_eq!(ds.examples[0].ground_truth, ctg_core::video_repr::Segment::new(1, 2));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(ctg(&["frobnicate"], dir).status.code(), Some(1));
    assert_eq!(ctg(&["train"], dir).status.code(), Some(1));
    assert_eq!(ctg(&["--help"], dir).status.code(), Some(0));

    std::fs::write(dir.join("bad.json"), r#"{"word_dim": 0}"#).unwrap();
    assert_eq!(ctg(&["train", "--config", "bad.json", "--out", "x"], dir).status.code(), Some(1));
    std::fs::write(dir.join("typo.json"), r#"{"wrod_dim": 3}"#).unwrap();
    assert_eq!(ctg(&["train", "--config", "typo.json", "--out", "x"], dir).status.code(), Some(1));

    std::fs::write(dir.join("exp.json"), r#"{"train_path": "missing.jsonl", "val_path": "missing.jsonl"}"#).unwrap();
    assert_eq!(ctg(&["train", "--config", "exp.json", "--out", "x"], dir).status.code(), Some(2));
}
