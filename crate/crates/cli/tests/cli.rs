use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn stackfold() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_stackfold"));
    cmd.env_remove("STACKFOLD_CONFIG").env_remove("RUST_LOG");
    cmd
}

fn run(args: &[&str]) -> Output {
    stackfold().args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout_json(out: &Output) -> Value {
    assert_eq!(code(out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Data {
    dir: tempfile::TempDir,
    manifest: PathBuf,
    features: PathBuf,
    config: PathBuf,
}

/// Small simulated benchmark plus a fast config.
fn simulated(n_labels: usize) -> Data {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let n_labels = n_labels.to_string();
    let summary = stdout_json(&run(&[
        "simulate", "--out", p(&out), "--n-samples", "240", "--n-labels", &n_labels, "--n-models", "2", "--seed", "3",
    ]));
    let config_path = PathBuf::from(summary["config"].as_str().unwrap());
    let mut config: Value = serde_json::from_str(&std::fs::read_to_string(&config_path).unwrap()).unwrap();
    config["epochs"] = 3.into();
    config["k_folds"] = 3.into();
    config["gbdt"]["rounds"] = 10.into();
    std::fs::write(&config_path, config.to_string()).unwrap();
    Data {
        manifest: PathBuf::from(summary["manifest"].as_str().unwrap()),
        features: PathBuf::from(summary["features"].as_str().unwrap()),
        config: config_path,
        dir,
    }
}

#[test]
fn simulate_then_pipeline_writes_a_report() {
    let data = simulated(3);
    let run_dir = data.dir.path().join("run");
    let out = stdout_json(&run(&[
        "pipeline", "--config", p(&data.config), "--run", p(&run_dir), "--manifest", p(&data.manifest), "--features",
        p(&data.features),
    ]));
    assert_eq!(out["oof_width"], 6);
    assert!(out["meta_holdout_macro_auc"].is_number());
    let report: Value = serde_json::from_str(&std::fs::read_to_string(run_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["metrics"].as_array().unwrap().len(), 3);
    assert_eq!(report["k_folds"], 3);
}

#[test]
fn stages_run_one_at_a_time_then_explain_and_external() {
    let data = simulated(11);
    let run_dir = data.dir.path().join("run");
    let r = p(&run_dir);
    let split = stdout_json(&run(&[
        "split", "--config", p(&data.config), "--run", r, "--manifest", p(&data.manifest), "--features", p(&data.features),
    ]));
    assert_eq!(split["fold_sizes"].as_array().unwrap().len(), 3);
    for stage in ["tune", "train", "oof", "stack", "eval", "report"] {
        let out = run(&[stage, "--run", r, "--jobs", "2"]);
        assert_eq!(code(&out), 0, "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(run_dir.join("report.json").is_file());

    let attribution = data.dir.path().join("ig.csv");
    let out = run(&[
        "explain", "--run", r, "--model", "m1", "--sample", "s00007", "--label", "dr", "--method", "occlusion", "--out",
        p(&attribution),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&attribution).unwrap();
    assert!(text.starts_with("# {"));
    assert_eq!(text.lines().count(), 1 + 1 + 48);

    let ext = data.dir.path().join("ext");
    let summary = stdout_json(&run(&[
        "eval-external", "--run", r, "--features", p(&data.features), "--manifest", p(&data.manifest), "--out", p(&ext),
    ]));
    assert_eq!(summary["evaluated_labels"].as_array().unwrap().len(), 11);
    assert_eq!(std::fs::read_dir(ext.join("roc").join("meta")).unwrap().count(), 11);
}

#[test]
fn config_is_read_from_the_environment() {
    let data = simulated(2);
    let run_dir = data.dir.path().join("run");
    let out = stackfold()
        .env("STACKFOLD_CONFIG", &data.config)
        .args(["split", "--run", p(&run_dir), "--manifest", p(&data.manifest), "--features", p(&data.features)])
        .output()
        .unwrap();
    let split = stdout_json(&out);
    assert_eq!(split["fold_sizes"].as_array().unwrap().len(), 3);
}

#[test]
fn invalid_input_exits_with_2() {
    let data = simulated(2);
    let run_dir = data.dir.path().join("run");
    let missing = data.dir.path().join("missing.csv");

    // Default config expects 11 labels.
    let out = run(&["validate", "--manifest", p(&data.manifest), "--features", p(&data.features)]);
    assert_eq!(code(&out), 2);
    let out = run(&["validate", "--config", p(&data.config), "--manifest", p(&missing), "--features", p(&data.features)]);
    assert_eq!(code(&out), 2);
    let ok = run(&["validate", "--config", p(&data.config), "--manifest", p(&data.manifest), "--features", p(&data.features)]);
    assert_eq!(stdout_json(&ok)["valid"], true);

    let bad_config = data.dir.path().join("bad.json");
    std::fs::write(&bad_config, r#"{"k_fold": 5}"#).unwrap();
    let out = run(&["validate", "--config", p(&bad_config), "--manifest", p(&data.manifest), "--features", p(&data.features)]);
    assert_eq!(code(&out), 2);

    assert_eq!(code(&run(&["split", "--no-such-flag"])), 2);
    assert_eq!(code(&run(&["simulate", "--out", p(&run_dir), "--n-samples", "0"])), 2);

    let out = run(&[
        "split", "--config", p(&data.config), "--run", p(&run_dir), "--manifest", p(&data.manifest), "--features",
        p(&data.features),
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(code(&run(&["tune", "--run", p(&run_dir), "--seed", "9"])), 2);
    assert_eq!(code(&run(&["explain", "--run", p(&run_dir), "--model", "m0", "--sample", "nope", "--label", "amd"])), 2);
}

#[test]
fn stage_failures_exit_with_3() {
    let data = simulated(2);
    let run_dir = data.dir.path().join("run");
    let out = run(&[
        "split", "--config", p(&data.config), "--run", p(&run_dir), "--manifest", p(&data.manifest), "--features",
        p(&data.features),
    ]);
    assert_eq!(code(&out), 0);
    let out = run(&["oof", "--run", p(&run_dir)]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage failed"));
}
