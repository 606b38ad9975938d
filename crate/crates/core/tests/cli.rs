use std::process::{Command, Output};

fn flowtrace(dir: &std::path::Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowtrace"))
        .args(["--output-dir", dir.to_str().unwrap()])
        .args(args)
        .env_remove("FLOWTRACE_CONFIG")
        .env_remove("FLOWTRACE_OUTPUT_ROOT")
        .output()
        .unwrap()
}

fn error_record(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("no stderr");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

#[test]
fn invalid_override_reports_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let rec = error_record(&flowtrace(dir.path(), &["--set", "train.epochs=0", "forgegen"]));
    assert_eq!(rec["error"], "config");
    assert!(rec["message"].as_str().unwrap().contains("epochs"));
}

#[test]
fn unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let rec = error_record(&flowtrace(dir.path(), &["--set", "train.epochz=3", "forgegen"]));
    assert_eq!(rec["error"], "config");
}

#[test]
fn missing_dataset_reports_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let rec = error_record(&flowtrace(dir.path(), &["train", "--data", missing.to_str().unwrap()]));
    assert_eq!(rec["error"], "format");
}

#[test]
fn missing_checkpoint_reports_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let rec = error_record(&flowtrace(dir.path(), &["eval"]));
    assert_eq!(rec["error"], "io");
    assert!(rec["message"].as_str().unwrap().contains("best.safetensors"));
}

#[test]
fn forgegen_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = flowtrace(dir.path(), &["--set", "data.train_count=4", "--set", "data.test_count=2", "forgegen"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_dir(dir.path().join("data/images")).unwrap().count(), 6);

    let csv = dir.path().join("t.csv");
    std::fs::write(&csv, "name,f1\nsplice,0.5\n").unwrap();
    let out = flowtrace(dir.path(), &["report", csv.to_str().unwrap()]);
    assert!(out.status.success());
    let md = String::from_utf8(out.stdout).unwrap();
    assert!(md.contains("| name | f1 |"), "{md}");
    assert!(md.contains("| splice | 0.5 |"), "{md}");
}
