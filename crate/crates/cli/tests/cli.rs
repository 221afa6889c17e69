use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn gtn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gtn"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("gtn runs")
}

fn gtn_env(args: &[&str], dir: &Path, key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gtn"))
        .args(args)
        .current_dir(dir)
        .env(key, value)
        .output()
        .expect("gtn runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn toy_config(features: &str, epochs: usize, output_dir: &str) -> String {
    format!(
        r#"{{
  "architecture": {{
    "kind": "mps", "grid": [1, 2], "bond_dim": 2, "num_classes": 2,
    "features": {{"kind": "{features}", "bins": 16}}
  }},
  "train": {{"learning_rate": 0.5, "dropout_keep": 1.0, "epochs": {epochs}, "seed": 7}},
  "data": {{"kind": "xor", "n": 400, "seed": 1}},
  "output_dir": "{output_dir}"
}}"#
    )
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn toy_xor_run_reaches_full_train_accuracy_and_evaluates_consistently() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("toy.json"), toy_config("learnable-table", 100, "out")).unwrap();
    let run = gtn(&["train", "toy.json"], tmp.path());
    assert!(run.status.success(), "{}", stderr(&run));
    let out = tmp.path().join("out");
    let s = summary(&out);
    assert_eq!(s["train_accuracy"].as_f64(), Some(1.0));
    assert_eq!(s["config_hash"].as_str().unwrap().len(), 64);
    assert!(out.join("metrics.csv").exists() && out.join("model.ckpt").exists());

    let eval = gtn(
        &["eval", "out/model.ckpt", "--config", "toy.json", "--split", "train", "--confusion", "cm.csv"],
        tmp.path(),
    );
    assert!(eval.status.success(), "{}", stderr(&eval));
    let printed = String::from_utf8(eval.stdout).unwrap();
    let acc: f64 = printed.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert_eq!(acc, s["train_accuracy"].as_f64().unwrap());

    // Rows of the confusion matrix sum to the per-class counts of the split.
    let data = gtn::data::make_xor_features(400, 1).unwrap();
    let counts = data.class_counts();
    let cm = fs::read_to_string(tmp.path().join("cm.csv")).unwrap();
    for (class, line) in cm.lines().skip(1).enumerate() {
        let row: usize = line.split(',').skip(1).map(|v| v.parse::<usize>().unwrap()).sum();
        assert_eq!(row, counts[class]);
    }
}

#[test]
fn checkpoint_round_trip_gives_identical_accuracy() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("toy.json"), toy_config("trig-squared", 5, "out")).unwrap();
    assert!(gtn(&["train", "toy.json"], tmp.path()).status.success());
    let eval = gtn(&["eval", "out/model.ckpt", "--config", "toy.json", "--split", "test"], tmp.path());
    assert!(eval.status.success(), "{}", stderr(&eval));
    let printed = String::from_utf8(eval.stdout).unwrap();
    let acc: f64 = printed.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert_eq!(Some(acc), summary(&tmp.path().join("out"))["test_accuracy"].as_f64());
}

#[test]
fn reruns_with_the_same_seed_write_identical_metrics_for_any_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("a.json"), toy_config("learnable-table", 10, "a")).unwrap();
    fs::write(tmp.path().join("b.json"), toy_config("learnable-table", 10, "b")).unwrap();
    assert!(gtn_env(&["train", "a.json"], tmp.path(), "GTN_THREADS", "1").status.success());
    assert!(gtn_env(&["train", "b.json"], tmp.path(), "GTN_THREADS", "3").status.success());
    let a = fs::read(tmp.path().join("a/metrics.csv")).unwrap();
    assert_eq!(a, fs::read(tmp.path().join("b/metrics.csv")).unwrap());
    assert_eq!(
        fs::read(tmp.path().join("a/model.ckpt")).unwrap(),
        fs::read(tmp.path().join("b/model.ckpt")).unwrap()
    );
}

#[test]
fn malformed_or_unknown_config_exits_1_without_writing() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.json"), "{ \"architecture\": ").unwrap();
    let unknown = toy_config("trig-squared", 1, "out").replace("\"seed\": 7", "\"seed\": 7, \"momentum\": 0.9");
    fs::write(tmp.path().join("unknown.json"), unknown).unwrap();
    for file in ["bad.json", "unknown.json", "missing.json"] {
        let run = gtn(&["train", file], tmp.path());
        assert_eq!(run.status.code(), Some(1), "{file}: {}", stderr(&run));
    }
    assert!(!tmp.path().join("out").exists());
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn bad_thread_count_and_usage_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(gtn_env(&["verify"], tmp.path(), "GTN_THREADS", "zero").status.code(), Some(1));
    assert_eq!(gtn(&["train"], tmp.path()).status.code(), Some(1));
    assert_eq!(gtn(&["frobnicate"], tmp.path()).status.code(), Some(1));
}

#[test]
fn missing_data_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = r#"{
  "architecture": {"kind": "mps", "grid": [28, 28], "bond_dim": 2, "num_classes": 10},
  "train": {"epochs": 1},
  "data": {"kind": "idx", "train_images": "nope", "train_labels": "nope",
           "test_images": "nope", "test_labels": "nope"}
}"#;
    fs::write(tmp.path().join("cfg.json"), cfg).unwrap();
    let run = gtn(&["train", "cfg.json"], tmp.path());
    assert_eq!(run.status.code(), Some(2), "{}", stderr(&run));
}

#[test]
fn eval_on_mismatched_geometry_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("toy.json"), toy_config("trig-squared", 1, "out")).unwrap();
    assert!(gtn(&["train", "toy.json"], tmp.path()).status.success());
    let ds = gtn::data::Dataset::new(gtn::data::Geometry::grid(2, 2), vec![0.0; 8], vec![0, 1], 2).unwrap();
    let (images, labels) = gtn::data::idx_to_bytes(&ds).unwrap();
    fs::write(tmp.path().join("img"), images).unwrap();
    fs::write(tmp.path().join("lbl"), labels).unwrap();
    let run = gtn(&["eval", "out/model.ckpt", "--images", "img", "--labels", "lbl"], tmp.path());
    assert_eq!(run.status.code(), Some(2), "{}", stderr(&run));
}

#[test]
fn overflow_exits_3_naming_a_string_and_keeps_last_good_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config("trig-squared", 5, "out").replace("\"learning_rate\": 0.5", "\"learning_rate\": 1e200");
    fs::write(tmp.path().join("cfg.json"), cfg).unwrap();
    let run = gtn(&["train", "cfg.json"], tmp.path());
    assert_eq!(run.status.code(), Some(3), "{}", stderr(&run));
    assert!(stderr(&run).contains("string"), "{}", stderr(&run));
    assert!(tmp.path().join("out/last-good.ckpt").exists());
}

#[test]
fn verify_passes_and_a_sign_flip_fails_the_gradient_property() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = gtn(&["verify", "--scale", "small"], tmp.path());
    let table = String::from_utf8_lossy(&ok.stdout).into_owned();
    assert!(ok.status.success(), "{table}{}", stderr(&ok));
    for name in ["duality", "rbm-triangle", "gradient-check", "kronecker-equivalence", "snake-adjacency"] {
        assert!(table.contains(name), "{table}");
    }

    let bad = gtn(&["verify", "--inject-fault", "sign-flip"], tmp.path());
    assert_eq!(bad.status.code(), Some(4));
    let table = String::from_utf8_lossy(&bad.stdout);
    let line = table.lines().find(|l| l.starts_with("gradient-check")).unwrap();
    assert!(line.contains("FAIL"), "{table}");
    assert!(table.lines().filter(|l| l.contains("FAIL")).count() == 1, "{table}");
    assert!(stderr(&bad).contains("gradient-check"));
}

#[test]
fn export_features_of_an_untrained_table_follows_the_trig_curve() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("toy.json"), toy_config("learnable-table", 0, "out")).unwrap();
    let run = gtn(&["train", "toy.json"], tmp.path());
    assert!(run.status.success(), "{}", stderr(&run));
    let export = gtn(&["export-features", "out/model.ckpt", "--output", "f.csv"], tmp.path());
    assert!(export.status.success(), "{}", stderr(&export));
    let csv = fs::read_to_string(tmp.path().join("f.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 16);
    for row in rows {
        let (x, f) = (row[0], &row[1..]);
        assert!((f[0] * f[0] + f[1] * f[1] - 1.0).abs() < 1e-12);
        let (c, s) = ((std::f64::consts::FRAC_PI_2 * x).cos().powi(2), (std::f64::consts::FRAC_PI_2 * x).sin().powi(2));
        let n = (c * c + s * s).sqrt();
        assert!((f[0] - c / n).abs() < 0.05 && (f[1] - s / n).abs() < 0.05, "{x}: {f:?}");
    }
}

#[test]
fn export_features_of_fixed_features_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("toy.json"), toy_config("trig-squared", 0, "out")).unwrap();
    assert!(gtn(&["train", "toy.json"], tmp.path()).status.success());
    let run = gtn(&["export-features", "out/model.ckpt"], tmp.path());
    assert_eq!(run.status.code(), Some(1));
    assert!(stderr(&run).contains("fixed"));
}

#[test]
fn generated_data_feeds_a_sequence_csv_run() {
    let tmp = tempfile::tempdir().unwrap();
    for (name, seed) in [("train.csv", "1"), ("test.csv", "2")] {
        let run = gtn(&["gen-data", "checkerboard", "--n", "200", "--seed", seed, "--output", name], tmp.path());
        assert!(run.status.success(), "{}", stderr(&run));
    }
    let text = fs::read_to_string(tmp.path().join("train.csv")).unwrap();
    assert_eq!(text.lines().count(), 201);
    assert!(text.starts_with("N=2,d=1,"));
    let cfg = r#"{
  "architecture": {"kind": "mps", "grid": [1, 2], "bond_dim": 2, "num_classes": 2},
  "train": {"learning_rate": 0.1, "epochs": 2, "dropout_keep": 1.0},
  "data": {"kind": "sequence-csv", "train": "train.csv", "test": "test.csv", "n_val": 40}
}"#;
    fs::write(tmp.path().join("cfg.json"), cfg).unwrap();
    let run = gtn(&["train", "cfg.json"], tmp.path());
    assert!(run.status.success(), "{}", stderr(&run));
    assert!(tmp.path().join("run/summary.json").exists());
}

#[test]
fn grid_runs_write_the_grid_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config("trig-squared", 2, "out").replace(
        "\"seed\": 7",
        "\"seed\": 7, \"grid\": {\"learning_rate\": [0.1, 1e200], \"dropout_keep\": [1.0], \"bond_dim\": [1, 2]}",
    );
    fs::write(tmp.path().join("cfg.json"), cfg).unwrap();
    let run = gtn(&["train", "cfg.json"], tmp.path());
    assert!(run.status.success(), "{}", stderr(&run));
    let grid = fs::read_to_string(tmp.path().join("out/grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 5);
    assert!(grid.contains("failed"));
    assert_eq!(summary(&tmp.path().join("out"))["learning_rate"].as_f64(), Some(0.1));
}
