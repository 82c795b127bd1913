use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn patan(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patan"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn patan")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const SPEC: &str = r#"{
  "num_source_classes": 4, "num_target_classes": 2, "d_in": 4, "k": 3,
  "samples_per_class_source": 6, "samples_per_class_target": 6, "noise_std": 0.2,
  "target_shift": {"rotation_angle": 0.3, "offset_scale": 0.5, "noise_multiplier": 1.5},
  "temporal_confusion_pairs": [[2, 0]], "seed": 4
}"#;

fn workspace() -> TempDir {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("spec.json"), SPEC).unwrap();
    let config = format!(
        r#"{{"data": {{"spec": {SPEC}}}, "runs": 2,
            "model": {{"d_sp": 6, "d_t": 6, "h_rel": 8}},
            "train": {{"epochs": 3, "batch_size": 4}}}}"#
    );
    fs::write(d.path().join("config.json"), config).unwrap();
    d
}

#[test]
fn gen_data_writes_a_loadable_csv() {
    let d = workspace();
    let o = patan(&["gen-data", "--spec", "spec.json", "--out", "f.csv"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(d.path().join("f.csv")).unwrap();
    assert!(csv.lines().count() > 1);

    // the same data again through a features source
    let cfg = r#"{"data": {"features": "f.csv"}, "train": {"epochs": 1}, "model": {"d_sp": 4, "d_t": 4, "h_rel": 4}}"#;
    fs::write(d.path().join("feat.json"), cfg).unwrap();
    let o = patan(&["train", "--config", "feat.json", "--method", "dann", "--out", "run"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_data_seed_override_changes_output() {
    let d = workspace();
    patan(&["gen-data", "--spec", "spec.json", "--out", "a.csv"], d.path());
    patan(&["gen-data", "--spec", "spec.json", "--seed", "9", "--out", "b.csv"], d.path());
    patan(&["gen-data", "--spec", "spec.json", "--out", "c.csv"], d.path());
    let read = |n: &str| fs::read(d.path().join(n)).unwrap();
    assert_eq!(read("a.csv"), read("c.csv"));
    assert_ne!(read("a.csv"), read("b.csv"));
}

#[test]
fn train_then_export() {
    let d = workspace();
    let o = patan(&["train", "--config", "config.json", "--out", "run"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.json", "result.json", "model.json", "metrics.jsonl", "gamma.csv"] {
        assert!(d.path().join("run").join(f).is_file(), "{f}");
    }
    let metrics = fs::read_to_string(d.path().join("run/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let o = patan(&["export-gamma", "--run", "run", "--out", "g.csv"], d.path());
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read(d.path().join("g.csv")).unwrap(),
        fs::read(d.path().join("run/gamma.csv")).unwrap()
    );

    let o = patan(&["export-features", "--run", "run", "--out", "feat.csv"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = fs::read_to_string(d.path().join("feat.csv")).unwrap().lines().count();
    // header plus 4 * 6 source and 2 * 6 target videos
    assert_eq!(rows, 1 + 24 + 12);
}

#[test]
fn compare_and_sweep_write_summaries() {
    let d = workspace();
    let o = patan(
        &["compare", "--config", "config.json", "--methods", "dann,patan,patan_no_adversarial", "--out", "cmp"],
        d.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.path().join("cmp/compare.json")).unwrap()).unwrap();
    assert_eq!(table["rows"].as_array().unwrap().len(), 3);
    assert_eq!(table["seeds"], serde_json::json!([0, 1]));

    let o = patan(&["sweep-targets", "--config", "config.json", "--counts", "2,4", "--out", "sw"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.path().join("sw/sweep.json").is_file());
}

#[test]
fn grad_check_passes_with_few_trials() {
    let d = workspace();
    let o = patan(&["grad-check", "--trials", "2"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(out.lines().count(), 26);
    assert!(out.lines().all(|l| l.ends_with("ok")));
}

#[test]
fn validation_errors_exit_1() {
    let d = workspace();
    fs::write(d.path().join("bad.json"), r#"{"data": {"benchmark": "hard-5of10-confused"}, "train": {"lr": -1}}"#)
        .unwrap();
    let cases: &[&[&str]] = &[
        &["frobnicate"],
        &["train", "--config", "config.json"],
        &["train", "--config", "missing.json", "--out", "x"],
        &["train", "--config", "bad.json", "--out", "x"],
        &["train", "--config", "config.json", "--method", "nope", "--out", "x"],
        &["compare", "--config", "config.json", "--methods", "dann,bogus", "--out", "x"],
        &["sweep-targets", "--config", "config.json", "--counts", "9", "--out", "x"],
        &["grad-check", "--trials", "0"],
        &["export-gamma", "--run", "nowhere", "--out", "x.csv"],
    ];
    for args in cases {
        let o = patan(args, d.path());
        assert_eq!(code(&o), 1, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn help_and_version_exit_0() {
    let d = workspace();
    assert_eq!(code(&patan(&["--help"], d.path())), 0);
    assert_eq!(code(&patan(&["--version"], d.path())), 0);
}

#[test]
fn unwritable_output_is_a_runtime_failure() {
    let d = workspace();
    fs::write(d.path().join("blocker"), "").unwrap();
    let o = patan(&["gen-data", "--spec", "spec.json", "--out", "blocker/f.csv"], d.path());
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}
