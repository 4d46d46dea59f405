use std::path::Path;
use std::process::{Command, Output};

fn semattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semattn")).args(args).output().expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn generate(root: &Path) {
    let out = semattn(&[
        "generate",
        "--data-root",
        root.to_str().unwrap(),
        "--samples-per-class",
        "4",
        "--set",
        "toy.val_samples_per_class=2",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(semattn(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(semattn(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(semattn(&["train", "--set", "missing_equals"]).status.code(), Some(2));
    assert_eq!(semattn(&["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_and_derived_keys_are_rejected() {
    let out = semattn(&["config", "--set", "train.no_such_key=1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("train.no_such_key"));

    let out = semattn(&["config", "--set", "fusion.num_scene_classes=7"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("manifest"));

    let out = semattn(&["config", "--set", "train.batch_size=lots"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_prints_overrides_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = semattn(&["config", "--seed", "42", "--set", "train.max_epochs=3", "--out-dir", "elsewhere"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.replace(' ', "") == "train.seed=42"), "{text}");
    assert!(text.lines().any(|l| l.replace(' ', "") == "train.max_epochs=3"), "{text}");

    let file = dir.path().join("run.cfg");
    std::fs::write(&file, &text).unwrap();
    let again = semattn(&["config", "--config", file.to_str().unwrap()]);
    assert!(again.status.success(), "{}", stderr(&again));
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}

#[test]
fn fusion_without_branch_checkpoints_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate(&data);
    let out = semattn(&[
        "train",
        "--stage",
        "fusion",
        "--data-root",
        data.to_str().unwrap(),
        "--out-dir",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("train that stage first"), "{}", stderr(&out));
}

#[test]
fn missing_dataset_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = semattn(&[
        "train",
        "--stage",
        "rgb",
        "--data-root",
        dir.path().join("nothing").to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error:"));
}

#[test]
fn branch_training_writes_checkpoint_log_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate(&data);
    let run = dir.path().join("run");
    let common = [
        "--data-root",
        data.to_str().unwrap(),
        "--out-dir",
        run.to_str().unwrap(),
        "--set",
        "train.max_epochs=1",
    ];
    let out = semattn(&[&["train", "--stage", "semantic"][..], &common].concat());
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["branch_semantic.ckpt", "branch_semantic_log.jsonl", "branch_semantic_config.txt"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let log = std::fs::read_to_string(run.join("branch_semantic_log.jsonl")).unwrap();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["loss"].as_f64().unwrap().is_finite());
    }

    // a semantic checkpoint cannot score the RGB pathway
    let ckpt = run.join("branch_semantic.ckpt");
    let bad = semattn(&[&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--pathway", "rgb"][..], &common].concat());
    assert_eq!(bad.status.code(), Some(1));

    let ok = semattn(&[&["eval", "--checkpoint", ckpt.to_str().unwrap()][..], &common].concat());
    assert!(ok.status.success(), "{}", stderr(&ok));
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("metrics.json")).unwrap()).unwrap();
    let top1 = metrics["top1"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&top1), "{metrics}");
    let preds = std::fs::read_to_string(run.join("predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 8);
}
