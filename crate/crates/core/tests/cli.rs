use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn priorseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_priorseg"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

const SMALL: &str = r#"
[phantom]
count = 2
test_count = 1
spec = { shape = [3, 96, 96] }
"#;

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let out = priorseg(dir.path(), &["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["phantom", "index", "train", "segment", "evaluate", "boxplot", "overlay"] {
        assert!(text.contains(cmd), "{cmd} missing from help:\n{text}");
    }
}

#[test]
fn unknown_mode_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = priorseg(dir.path(), &["train", "--mode", "five_channels"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown mode"));
}

#[test]
fn missing_config_is_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = priorseg(dir.path(), &["--config", "absent.toml", "phantom"]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_line(&out);
    assert_eq!(err["status"], "error");
    assert_eq!(err["kind"], "io");
    assert!(err["message"].as_str().unwrap().contains("absent.toml"));
}

#[test]
fn invalid_config_values_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[stitch]\nstride = 0\n").unwrap();
    let out = priorseg(dir.path(), &["--config", "bad.toml", "index"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["kind"], "format");
}

#[test]
fn zero_phantoms_warns_and_writes_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = priorseg(dir.path(), &["phantom", "--count", "0", "--test-count", "0", "--out", "empty"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("empty/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subjects"].as_array().unwrap().len(), 0);
}

#[test]
fn evaluate_names_the_missing_prediction() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    assert!(priorseg(dir.path(), &["--config", "small.toml", "phantom"]).status.success());
    fs::create_dir(dir.path().join("preds")).unwrap();
    let out = priorseg(dir.path(), &["--config", "small.toml", "evaluate", "--predictions", "preds"]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_line(&out);
    assert_eq!(err["kind"], "missing_prediction");
    assert!(err["message"].as_str().unwrap().contains("phantom001"));
}

#[test]
fn segment_without_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    assert!(priorseg(dir.path(), &["--config", "small.toml", "phantom"]).status.success());
    let out = priorseg(dir.path(), &["--config", "small.toml", "segment", "--mode", "three"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["kind"], "io");
}

#[test]
fn phantom_and_index_report_counts() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let out = priorseg(dir.path(), &["--config", "small.toml", "phantom"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("wrote 2 subjects"));
    let out = priorseg(dir.path(), &["--config", "small.toml", "index"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("work/index.raw").is_file());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("indexed"));
}
