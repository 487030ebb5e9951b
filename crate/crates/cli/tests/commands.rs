use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use eatformer::model::ParamReport;
use eatformer::train::parse_history_csv;
use serde_json::Value;

fn eatformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eatformer"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("EATFORMER_OUT")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A few-second micro run on a small synthetic set.
fn quick_train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--preset",
        "micro",
        "--epochs",
        "3",
        "--set",
        "data.train_per_class=12",
        "--set",
        "data.val_per_class=6",
        "--batch-size",
        "8",
        "-o",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    eatformer(&args)
}

#[test]
fn synth_training_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = eatformer(&[
        "train",
        "--dataset",
        "synth",
        "--epochs",
        "5",
        "--seed",
        "7",
        "-o",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in [
        "history.csv",
        "best.ckpt",
        "metrics.json",
        "config.resolved",
        "split.manifest",
    ] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    let history = parse_history_csv(&fs::read_to_string(out.join("history.csv")).unwrap()).unwrap();
    assert_eq!(history.len(), 5);
    let metrics: Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["val"]["total"], 90);
    assert_eq!(metrics["train"]["total"], 300);
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_eatformer"))
        .args(["train", "--preset", "micro", "--epochs", "1", "--seed", "4"])
        .args(["--set", "data.train_per_class=4", "--set", "data.val_per_class=2"])
        .env("EATFORMER_OUT", dir.path())
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("train-synth-seed4/history.csv").is_file());
}

#[test]
fn missing_dataset_directory_exits_2_and_names_it() {
    let o = eatformer(&["train", "--data-dir", "/no/such/gtsrb/root"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/gtsrb/root"), "{}", stderr(&o));
}

#[test]
fn every_config_violation_is_listed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "[optim]\nbeta1 = 1.5\nbatch_size = 0\n[nonsense]\n").unwrap();
    let o = eatformer(&["train", "-c", cfg.to_str().unwrap(), "--set", "augment.hflip_prob=2"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for needle in ["beta1", "batch_size", "[nonsense]", "hflip_prob"] {
        assert!(err.contains(needle), "{needle} not reported:\n{err}");
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "[optim]\nepochs = 9\n[run]\nseed = 1\n").unwrap();
    let out = dir.path().join("run");
    let o = quick_train(&out, &["-c", cfg.to_str().unwrap(), "--epochs", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let resolved = fs::read_to_string(out.join("config.resolved")).unwrap();
    assert!(resolved.contains("epochs = 2"));
    assert!(resolved.contains("seed = 1"));
}

#[test]
fn eval_reproduces_the_recorded_validation_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = quick_train(&out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics: Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    let history = parse_history_csv(&fs::read_to_string(out.join("history.csv")).unwrap()).unwrap();
    let best_epoch = metrics["best_epoch"].as_u64().unwrap() as usize;
    let recorded = history[best_epoch - 1].val_acc;

    let ckpt = out.join("best.ckpt");
    let o = eatformer(&["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["accuracy"].as_f64().unwrap(), recorded);
    assert_eq!(metrics["val"]["accuracy"].as_f64().unwrap(), recorded);
    assert!(report.get("per_class").is_none());

    let o = eatformer(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--per-class"]);
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["per_class"].as_array().unwrap().len(), 3);
}

#[test]
fn eval_rejects_truncated_checkpoints_and_class_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert!(quick_train(&out, &["--epochs", "1"]).status.success());
    let bytes = fs::read(out.join("best.ckpt")).unwrap();
    let cut = out.join("cut.ckpt");
    fs::write(&cut, &bytes[..bytes.len() - 10]).unwrap();
    let o = eatformer(&["eval", "--checkpoint", cut.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("format error"), "{}", stderr(&o));

    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/gtsrb_mini");
    if fixture.is_dir() {
        // Checkpoint has 3 classes; select two of the fixture's.
        let ckpt = out.join("best.ckpt");
        let o = eatformer(&[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data-dir",
            fixture.to_str().unwrap(),
            "--set",
            "data.classes=0,1",
        ]);
        assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
        assert!(stderr(&o).contains("classes"), "{}", stderr(&o));
    }
}

#[test]
fn diverging_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = quick_train(&out, &["--lr", "1e30"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("numeric failure"), "{}", stderr(&o));
}

#[test]
fn params_json_round_trips_to_the_same_totals() {
    let o = eatformer(&[
        "params",
        "--preset",
        "desk",
        "--resolution",
        "32",
        "--classes",
        "3",
        "--json",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: ParamReport = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report.total_params, report.enumerated_params);
    assert_eq!(report.sum_of_rows(), report.total_params);

    let text = stdout(&eatformer(&[
        "params",
        "--preset",
        "desk",
        "--resolution",
        "32",
        "--classes",
        "3",
    ]));
    let total_line = text.lines().find(|l| l.starts_with("total")).unwrap();
    let total: usize = total_line.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert_eq!(total, report.total_params);
}

#[test]
fn all_local_split_has_no_global_parameters() {
    let o = eatformer(&["params", "--preset", "micro", "--set", "model.split_ratio=0", "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: ParamReport = serde_json::from_str(&stdout(&o)).unwrap();
    let gli: Vec<_> = report.rows.iter().filter(|r| r.gli_formula.is_some()).collect();
    assert!(!gli.is_empty());
    assert!(gli.iter().all(|r| r.global_params == Some(0)));
}

#[test]
fn params_rejects_an_invalid_spec() {
    let o = eatformer(&["params", "--set", "model.heads=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("heads"));
}

#[test]
fn verify_identity_suite_passes() {
    let o = eatformer(&["verify", "--suite", "identity"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("mdmsa.zero_offsets_is_msa"));
    assert!(stdout(&o).contains("0 failed"));
}

#[test]
fn injected_fault_fails_with_the_check_named() {
    let o = eatformer(&["verify", "--suite", "oracles", "--inject-fault", "conv2d", "--json"]);
    assert_eq!(o.status.code(), Some(1));
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let failed: Vec<&str> = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["passed"] == false)
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert_eq!(failed, ["conv2d.backward"]);
    assert!(stderr(&o).contains("conv2d.backward"));
}

#[test]
fn unknown_suite_or_op_is_a_usage_error() {
    assert_eq!(eatformer(&["verify", "--suite", "everything"]).status.code(), Some(2));
    assert_eq!(
        eatformer(&["verify", "--inject-fault", "frobnicate"]).status.code(),
        Some(2)
    );
}
