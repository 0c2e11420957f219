use std::path::Path;
use std::process::{Command, Output};

use damd_core::augmentation::{load_sample, read_annotations, read_jsonl};
use damd_core::evaluation::Prediction;
use damd_core::morphable::read_model;

fn damd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_damd")).args(args).current_dir(dir).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = damd(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Model plus a small virtual dataset in a fresh directory.
fn fixture(count: usize) -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["gen-model", "--seed", "5", "--vertices", "400", "--out", "model.bin"]);
    ok(
        tmp.path(),
        &["gen-data", "--seed", "5", "--model", "model.bin", "--count", &count.to_string(), "--out", "data"],
    );
    tmp
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(damd(tmp.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(damd(tmp.path(), &["gen-model"]).status.code(), Some(1));
    assert_eq!(damd(tmp.path(), &["train", "--out", "x"]).status.code(), Some(1));
    assert_eq!(damd(tmp.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = damd(tmp.path(), &["gen-data", "--model", "nope.bin", "--out", "d"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("nope.bin"));

    let small = damd(tmp.path(), &["gen-model", "--vertices", "40", "--out", "m.bin"]);
    assert_eq!(small.status.code(), Some(2));
    assert!(stderr(&small).contains("68"));

    std::fs::write(tmp.path().join("a.jsonl"), "{\"image_path\":\"x\"}\n").unwrap();
    let bad = damd(tmp.path(), &["eval", "--data", "a.jsonl", "--predictions", "a.jsonl", "--out", "e"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("a.jsonl:1:"), "{}", stderr(&bad));
}

#[test]
fn generated_dataset_is_self_consistent() {
    let tmp = fixture(5);
    let model = read_model(&tmp.path().join("model.bin")).unwrap();
    let ann = tmp.path().join("data/annotations.jsonl");
    let records = read_annotations(&ann).unwrap();
    assert_eq!(records.len(), 5);
    for a in &records {
        let s = load_sample(&ann, a).unwrap();
        assert!(s.reprojection_error(&model).unwrap() < 1e-6);
        assert_eq!(s.image.width(), 120);
    }
}

#[test]
fn loss_log_has_one_row_per_step() {
    let tmp = fixture(4);
    ok(
        tmp.path(),
        &[
            "train",
            "--model",
            "model.bin",
            "--data",
            "data/annotations.jsonl",
            "--steps",
            "7",
            "--batch",
            "3",
            "--out",
            "run",
        ],
    );
    let csv = std::fs::read_to_string(tmp.path().join("run/loss.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "step,lr,loss");
    assert_eq!(rows.len(), 8);
    // milestones ceil(7·[15,25,30]/40) = [3, 5, 6]
    let lrs: Vec<&str> = rows[1..].iter().map(|r| r.split(',').nth(1).unwrap()).collect();
    assert_eq!(lrs, ["0.01", "0.01", "0.01", "0.002", "0.002", "0.0004", "0.00008"]);
    assert!(tmp.path().join("run/weights.dwts").exists());
}

#[test]
fn diverging_training_exits_three_with_last_good_weights() {
    let tmp = fixture(4);
    let out = damd(
        tmp.path(),
        &[
            "train",
            "--model",
            "model.bin",
            "--data",
            "data/annotations.jsonl",
            "--steps",
            "50",
            "--batch",
            "4",
            "--lr",
            "1e30",
            "--out",
            "run",
        ],
    );
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("last good weights"));
    let rows = std::fs::read_to_string(tmp.path().join("run/loss.csv")).unwrap().lines().count() - 1;
    assert!(rows < 50);
    let weights = damd_core::tensor::read_weights::<f32>(&tmp.path().join("run/weights.dwts")).unwrap();
    assert!(weights.values().all(|t| t.all_finite()));
}

#[test]
fn fit_then_eval_round_trip() {
    let tmp = fixture(4);
    let d = tmp.path();
    ok(d, &["train", "--model", "model.bin", "--data", "data/annotations.jsonl", "--steps", "2", "--out", "run"]);
    // one record without a bbox is skipped with a warning
    let mut lines = std::fs::read_to_string(d.join("data/annotations.jsonl")).unwrap();
    lines += "{\"image_path\":\"images/000000.ppm\"}\n";
    std::fs::write(d.join("data/fit_input.jsonl"), lines).unwrap();
    let fit = ok(
        d,
        &[
            "fit",
            "--model",
            "model.bin",
            "--weights",
            "run/weights.dwts",
            "--data",
            "data/fit_input.jsonl",
            "--out",
            "pred.jsonl",
        ],
    );
    assert!(stderr(&fit).contains("no bbox"));
    let preds: Vec<Prediction> = read_jsonl(&d.join("pred.jsonl")).unwrap();
    assert_eq!(preds.len(), 4);
    assert!(preds.iter().all(|p| p.landmarks.len() == 68));
    ok(d, &["eval", "--data", "data/annotations.jsonl", "--predictions", "pred.jsonl", "--out", "ev"]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("ev/report.json")).unwrap()).unwrap();
    assert_eq!(report["samples"], 4);
    assert!(report["nme"].as_f64().unwrap() > 0.0);
}

#[test]
fn eval_of_ground_truth_is_zero() {
    let tmp = fixture(6);
    let d = tmp.path();
    ok(d, &["eval", "--data", "data/annotations.jsonl", "--predictions", "data/annotations.jsonl", "--out", "ev"]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("ev/report.json")).unwrap()).unwrap();
    assert_eq!(report["nme"], 0.0);
    assert_eq!(report["yaw_bins"]["mean"], 0.0);
    let ced = std::fs::read_to_string(d.join("ev/ced.csv")).unwrap();
    assert_eq!(ced.lines().nth(1), Some("0,1"));
    assert!(std::fs::read_to_string(d.join("ev/report.txt")).unwrap().contains("[0,30]"));
}

#[test]
fn analyze_lists_six_networks() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["analyze", "--out", "a"]);
    let table = String::from_utf8(out.stdout).unwrap();
    for name in ["MDNet", "AMDNet", "DAMDNet", "ResNeXt50-32x4d", "DenseNet121", "MobileNetV2"] {
        assert!(table.lines().any(|l| l.starts_with(&format!("{name} "))), "{name} missing:\n{table}");
    }
    let rows: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("a/analysis.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 6);
    let dense = rows.iter().find(|r| r["name"] == "DenseNet121").unwrap();
    assert!((dense["params_m"].as_f64().unwrap() - 7.02).abs() / 7.02 < 0.05);
}

#[test]
fn augment_and_render_write_readable_files() {
    let tmp = fixture(3);
    let d = tmp.path();
    ok(d, &["augment", "--seed", "2", "--model", "model.bin", "--data", "data/annotations.jsonl", "--out", "aug"]);
    let model = read_model(&d.join("model.bin")).unwrap();
    let ann = d.join("aug/annotations.jsonl");
    let before = read_annotations(&d.join("data/annotations.jsonl")).unwrap();
    let after = read_annotations(&ann).unwrap();
    for (a, b) in before.iter().zip(&after) {
        assert!(b.yaw_deg.abs() >= a.yaw_deg.abs() - 1e-9 && b.yaw_deg.abs() <= 90.0 + 1e-9);
        assert!(load_sample(&ann, b).unwrap().reprojection_error(&model).unwrap() < 1e-6);
    }
    ok(d, &["render", "--model", "model.bin", "--data", "aug/annotations.jsonl", "--out", "r"]);
    assert_eq!(std::fs::read_dir(d.join("r")).unwrap().count(), 3);
    ok(d, &["render", "--model", "model.bin", "--yaw", "-45", "--size", "64", "--out", "pose.ppm"]);
    let img = damd_core::imaging::RgbImage::read_ppm(&d.join("pose.ppm")).unwrap();
    assert_eq!((img.width(), img.height()), (64, 64));
}
