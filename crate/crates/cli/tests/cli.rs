use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn etr(run: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_etr"))
        .arg("--config")
        .arg(smoke_config())
        .arg("--run")
        .arg(run)
        .args(args)
        .output()
        .expect("spawn etr")
}

fn ok(run: &Path, args: &[&str]) -> String {
    let out = etr(run, args);
    assert!(
        out.status.success(),
        "etr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn smoke_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path();
    for step in [
        &["synth-data"][..],
        &["train-backbone"],
        &["finetune-expert"],
        &["collect-queries"],
        &["train-head"],
    ] {
        ok(run, step);
    }
    let head = std::fs::read(run.join("head.json")).unwrap();

    let again = run.join("again.json");
    ok(run, &["train-head", "--out", again.to_str().unwrap()]);
    assert_eq!(std::fs::read(&again).unwrap(), head, "retraining the head is not byte-identical");

    ok(run, &["generate", "--query", "reverse: abc"]);
    let trace: serde_json::Value = serde_json::from_str(&ok(run, &["generate", "--query", "sort: 3142", "--trace"])).unwrap();
    assert!(trace["events"].is_array(), "{trace}");

    ok(run, &["evaluate"]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("eval/report.json")).unwrap()).unwrap();
    assert!(report["routing"]["accuracy"].as_f64().unwrap() >= 0.0);
    assert!(run.join("eval/routing_matrix.csv").exists());

    // A head trained against a different backbone must be rejected.
    let foreign = run.join("foreign.json");
    ok(run, &["--seed", "11", "train-backbone", "--out", foreign.to_str().unwrap()]);
    std::fs::copy(&foreign, run.join("models/meta.json")).unwrap();
    let out = etr(run, &["evaluate"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("fingerprint mismatch"), "{err}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = etr(dir.path(), &["train-head", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert!(err["error"]["message"].is_string(), "{err}");
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_etr"))
        .args(["--config", "/nonexistent/etr.json", "--run"])
        .arg(dir.path())
        .arg("synth-data")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("\"error\""));
}

#[test]
fn missing_inputs_are_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = etr(dir.path(), &["train-head"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
