use std::process::Command;

fn catch(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_catch"))
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .expect("spawn catch")
}

fn error_json(out: &std::process::Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr line");
    serde_json::from_str(line).expect("error JSON")
}

#[test]
fn missing_config_reports_io_error() {
    let out = catch(&["main", "--config", "/nonexistent/cfg.json"]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_json(&out);
    assert_eq!(e["error"]["kind"], "io");
    assert!(e["error"]["message"].as_str().unwrap().contains("/nonexistent/cfg.json"));
}

#[test]
fn unknown_config_field_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"experiment": "main", "learning_rte": 1}"#).unwrap();
    let out = catch(&["main", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "config");
}

#[test]
fn no_train_without_artifacts_names_the_missing_step() {
    let dir = tempfile::tempdir().unwrap();
    let out = catch(&["eval", "--policy", "hard", "--no-train", "--output", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_json(&out);
    assert_eq!(e["error"]["kind"], "missing_artifact");
    assert!(e["error"]["message"].as_str().unwrap().contains("pretrain"));
}

#[test]
fn bad_temperature_is_rejected_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let out = catch(&["routing", "--temperature", "0", "--output", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "config");
}
