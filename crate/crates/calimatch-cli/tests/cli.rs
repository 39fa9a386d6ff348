//! End-to-end tests driving the binary: exit codes, artifact layout,
//! idempotence, and the full prepare/train/evaluate/theory-check pipeline.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_calimatch"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn prepare_small(dir: &Path, seed: u64) {
    run_ok(&[
        "prepare",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        &seed.to_string(),
        "--kappa",
        "0.5",
        "--seen",
        "3",
        "--unseen",
        "2",
        "--n-labeled",
        "60",
        "--n-unlabeled",
        "160",
        "--n-test",
        "80",
        "--dim",
        "3",
        "--spread",
        "0.8",
    ]);
}

fn small_train_config() -> serde_json::Value {
    serde_json::json!({
        "epochs": 3,
        "warmup_epochs": 2,
        "batch_labeled": 16,
        "batch_unlabeled": 16,
        "hidden_dims": [8],
        "seed": 7
    })
}

#[test]
fn prepare_records_kappa_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data1 = tmp.path().join("d1");
    let data2 = tmp.path().join("d2");
    prepare_small(&data1, 3);
    prepare_small(&data2, 3);
    let m1: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(data1.join("manifest.json")).unwrap()).unwrap();
    let m2: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(data2.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m1["kappa"], 0.5);
    assert_eq!(m1["checksum"], m2["checksum"]);
    assert!(m1["run"]["started_unix"].is_number());
}

#[test]
fn missing_out_flag_is_a_usage_error() {
    let out = bin().args(["prepare"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_preset_is_a_usage_error_listing_the_presets() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "train",
            "--config",
            "x.json",
            "--data",
            "y.json",
            "--out",
            tmp.path().to_str().unwrap(),
            "--preset",
            "mixmatch",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    for name in ["calimatch", "openmatch", "fixmatch", "supervised"] {
        assert!(stderr.contains(name), "{stderr}");
    }
}

#[test]
fn invalid_config_reports_every_field_and_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    prepare_small(&data, 1);
    let config_path = tmp.path().join("config.json");
    fs::write(
        &config_path,
        r#"{"epochs": 2, "warmup_epochs": 9, "tau1": 2.0, "no_such_knob": 1}"#,
    )
    .unwrap();
    let out = bin()
        .args([
            "train",
            "--config",
            config_path.to_str().unwrap(),
            "--data",
            data.join("manifest.json").to_str().unwrap(),
            "--out",
            tmp.path().join("run").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("no_such_knob"), "{stderr}");
}

#[test]
fn missing_data_manifest_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let config_path = tmp.path().join("config.json");
    fs::write(&config_path, small_train_config().to_string()).unwrap();
    let out = bin()
        .args([
            "train",
            "--config",
            config_path.to_str().unwrap(),
            "--data",
            tmp.path().join("nope.json").to_str().unwrap(),
            "--out",
            tmp.path().join("run").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn train_help_documents_every_config_field() {
    let out = run_ok(&["train", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for field in calimatch::trainer::TrainConfig::FIELDS {
        assert!(text.contains(field), "help is missing {field}");
    }
}

#[test]
fn full_pipeline_produces_all_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    prepare_small(&data, 11);
    let manifest = data.join("manifest.json");
    let config_path = tmp.path().join("config.json");
    fs::write(&config_path, small_train_config().to_string()).unwrap();

    let run_dir = tmp.path().join("run");
    run_ok(&[
        "train",
        "--config",
        config_path.to_str().unwrap(),
        "--data",
        manifest.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
        "--preset",
        "calimatch",
    ]);
    for name in [
        "log.csv",
        "epochs.csv",
        "tables.csv",
        "checkpoint-best",
        "checkpoint-last",
        "manifest.json",
    ] {
        assert!(run_dir.join(name).exists(), "{name} missing");
    }

    // The stored config hash matches a recomputation over the stored config.
    let ckpt: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("checkpoint-last")).unwrap())
            .unwrap();
    let config: calimatch::trainer::TrainConfig =
        serde_json::from_value(ckpt["config"].clone()).unwrap();
    assert_eq!(
        ckpt["config_hash"].as_str().unwrap(),
        calimatch::trainer::config_hash(&config)
    );

    let eval_dir = tmp.path().join("eval");
    run_ok(&[
        "evaluate",
        "--checkpoint",
        run_dir.join("checkpoint-best").to_str().unwrap(),
        "--data",
        manifest.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    for name in [
        "report.json",
        "reliability_multiclass.csv",
        "reliability_binary_ood.csv",
        "sweep.csv",
        "manifest.json",
    ] {
        assert!(eval_dir.join(name).exists(), "{name} missing");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("report.json")).unwrap()).unwrap();
    assert!(report["top1_accuracy"].as_f64().unwrap() >= 0.0);
    assert_eq!(report["sweep"].as_array().unwrap().len(), 4);

    let theory_path = tmp.path().join("theory.json");
    run_ok(&[
        "theory-check",
        "--checkpoint",
        run_dir.join("checkpoint-last").to_str().unwrap(),
        "--data",
        manifest.to_str().unwrap(),
        "--seeds",
        "5",
        "--lemma-n",
        "2000",
        "--out",
        theory_path.to_str().unwrap(),
    ]);
    let theory: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&theory_path).unwrap()).unwrap();
    assert_eq!(theory["all_bounds_hold"], true);
    assert_eq!(theory["lemma_violations"], 0);
    assert_eq!(theory["draws"].as_array().unwrap().len(), 5);
}

#[test]
fn reruns_are_idempotent_modulo_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    prepare_small(&data, 21);
    let manifest = data.join("manifest.json");
    let config_path = tmp.path().join("config.json");
    fs::write(&config_path, small_train_config().to_string()).unwrap();

    let mut outputs = Vec::new();
    for name in ["run_a", "run_b"] {
        let run_dir = tmp.path().join(name);
        run_ok(&[
            "train",
            "--config",
            config_path.to_str().unwrap(),
            "--data",
            manifest.to_str().unwrap(),
            "--out",
            run_dir.to_str().unwrap(),
        ]);
        outputs.push(run_dir);
    }
    for name in ["log.csv", "epochs.csv", "tables.csv", "checkpoint-best", "checkpoint-last"] {
        let a = fs::read(outputs[0].join(name)).unwrap();
        let b = fs::read(outputs[1].join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}
