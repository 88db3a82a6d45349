//! CLI contract: flags, exit codes, diagnostics.

use std::process::Command;

fn cilforge() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cilforge"))
}

#[test]
fn missing_config_flag_exits_2_with_usage() {
    let out = cilforge().output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--config"), "usage must mention --config: {stderr}");
}

#[test]
fn bad_config_path_exits_2_naming_path() {
    let out = cilforge()
        .args(["--config", "/nonexistent/nope.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("/nonexistent/nope.json"), "{stderr}");
}

#[test]
fn invalid_json_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.json");
    std::fs::write(&path, "{not json").unwrap();
    let out = cilforge()
        .arg("--config")
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_model_exits_2_listing_names() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(
        &path,
        r#"{"model_name": "ewc", "init_cls": 2, "increment": 2, "dataset": "blobs"}"#,
    )
    .unwrap();
    let out = cilforge().arg("--config").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("simplecil"), "error should list valid names: {stderr}");
}

#[test]
fn successful_run_writes_reports_and_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(
        &path,
        r#"{
            "model_name": "simplecil",
            "init_cls": 2,
            "increment": 2,
            "backbone_type": "frozen_random",
            "dataset": {"kind": "blobs", "classes": 4, "per_class": 6, "dim": 8, "spread": 0.05},
            "backbone": {"embed_dim": 16, "depth": 2, "heads": 4, "token_count": 4}
        }"#,
    )
    .unwrap();
    let out_dir = dir.path().join("results");
    let out = cilforge()
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(&out_dir)
        .args(["--log-level", "warn"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("results.json").exists());
    assert!(out_dir.join("results.csv").exists());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("stage 0:"), "{stdout}");
    assert!(stdout.contains("simplecil"), "{stdout}");
}

#[test]
fn resume_flag_round_trips_through_cli() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(
        &path,
        r#"{
            "model_name": "finetune",
            "init_cls": 2,
            "increment": 2,
            "backbone_type": "frozen_random",
            "dataset": {"kind": "blobs", "classes": 4, "per_class": 6, "dim": 8, "spread": 0.05},
            "backbone": {"embed_dim": 16, "depth": 2, "heads": 4, "token_count": 4},
            "optimization": {"epochs": 1, "batch_size": 8}
        }"#,
    )
    .unwrap();
    let full_out = dir.path().join("full");
    let status = cilforge()
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(&full_out)
        .args(["--log-level", "warn"])
        .status()
        .unwrap();
    assert!(status.success());

    let resumed_out = dir.path().join("resumed");
    let status = cilforge()
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(&resumed_out)
        .arg("--resume")
        .arg(full_out.join("ckpt_task_0.ckpt"))
        .args(["--log-level", "warn"])
        .status()
        .unwrap();
    assert!(status.success());

    let a = std::fs::read_to_string(full_out.join("results.csv")).unwrap();
    let b = std::fs::read_to_string(resumed_out.join("results.csv")).unwrap();
    assert_eq!(a, b, "resumed CLI run must reproduce the uninterrupted run");
}
