//! Black-box checks of the command-line binary: exit codes, JSON shape,
//! and byte-level determinism under a fixed seed.

use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_permloss")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary launches")
}

fn write_spec(name: &str, body: &str) -> PathBuf {
    let path = std::env::temp_dir().join(format!("permloss-cli-{}-{name}", std::process::id()));
    std::fs::write(&path, body).expect("spec file writes");
    path
}

#[test]
fn missing_required_argument_is_a_usage_error() {
    let out = run(&["eval", "--y", "3", "--v", "0,0,0"]);
    assert_eq!(
        out.status.code(),
        Some(1),
        "missing --loss should exit 1, stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = run(&["fabricate", "--loss", "x.json"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_cross_entropy_at_zero_is_log_k() {
    let spec = write_spec("ce3.json", r#"{"kind": "cross_entropy", "k": 3}"#);
    let out = run(&["eval", "--loss", spec.to_str().unwrap(), "--y", "3", "--v", "0,0,0"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).expect("stdout is one JSON object");
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["command"], "eval");
    let value = v["report"]["value"].as_f64().unwrap();
    assert!(
        (value - 3.0_f64.ln()).abs() <= 1e-12,
        "uniform scores under cross entropy give log 3, got {value}"
    );
}

#[test]
fn verify_identities_passes_and_is_deterministic() {
    let args = ["verify-identities", "--k", "4", "--trials", "100", "--seed", "7"];
    let first = run(&args);
    assert_eq!(first.status.code(), Some(0));
    let second = run(&args);
    assert_eq!(
        first.stdout, second.stdout,
        "same seed must reproduce byte-identical output"
    );
    assert!(!first.stdout.is_empty());
}

#[test]
fn grad_check_emits_report_fields() {
    let spec = write_spec("exp4.json", r#"{"kind": "exponential", "k": 4}"#);
    let out = run(&[
        "grad-check",
        "--loss",
        spec.to_str().unwrap(),
        "--samples",
        "50",
        "--seed",
        "3",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["report"]["pass"], true);
    assert!(v["report"]["max_rel_err"].as_f64().unwrap() <= 1e-5);
}

#[test]
fn failing_check_exits_two() {
    // The pairwise hinge fails the scalar regularity conditions (its edge
    // function is not twice differentiable), so the probe reports failure.
    let spec = write_spec("hinge3.json", r#"{"kind": "ww_hinge", "k": 3}"#);
    let out = run(&[
        "probe",
        "--loss",
        spec.to_str().unwrap(),
        "--kind",
        "gamma-phi",
    ]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "a failed check must exit 2; stdout: {} stderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    // The report itself still prints.
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["report"]["pass"], false);
}

#[test]
fn out_flag_writes_the_report_to_a_file() {
    let spec = write_spec("ce4.json", r#"{"kind": "cross_entropy", "k": 4}"#);
    let target = std::env::temp_dir().join(format!("permloss-out-{}.json", std::process::id()));
    let out = run(&[
        "link",
        "--loss",
        spec.to_str().unwrap(),
        "--p",
        "0.1,0.2,0.3,0.4",
        "--out",
        target.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(out.stdout.is_empty(), "--out should silence stdout");
    let text = std::fs::read_to_string(&target).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(v["report"]["kkt_residual"].as_f64().unwrap() <= 1e-8);
    std::fs::remove_file(&target).ok();
}

#[test]
fn runtime_error_exits_one() {
    // Boundary distribution: the conditional risk has no minimizer.
    let spec = write_spec("ce3b.json", r#"{"kind": "cross_entropy", "k": 3}"#);
    let out = run(&["link", "--loss", spec.to_str().unwrap(), "--p", "0,0.5,0.5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        !out.stderr.is_empty(),
        "runtime errors should say what went wrong"
    );
}

#[test]
fn train_demo_is_deterministic_and_beats_the_band() {
    let spec = write_spec("ce3t.json", r#"{"kind": "cross_entropy", "k": 3}"#);
    let args = [
        "train-demo",
        "--loss",
        spec.to_str().unwrap(),
        "--n",
        "600",
        "--seed",
        "11",
        "--epochs",
        "120",
    ];
    let first = run(&args);
    assert_eq!(
        first.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&first.stderr)
    );
    let second = run(&args);
    assert_eq!(first.stdout, second.stdout);
    let v: serde_json::Value = serde_json::from_slice(&first.stdout).unwrap();
    let test_01 = v["report"]["test_01"].as_f64().unwrap();
    let bayes = v["report"]["bayes_estimate"].as_f64().unwrap();
    assert!(test_01 <= bayes + 0.06, "smaller run stays near the band");
}

#[test]
fn calibration_probe_prints_a_positive_gap() {
    let spec = write_spec("ce3c.json", r#"{"kind": "cross_entropy", "k": 3}"#);
    let out = run(&[
        "calibration-probe",
        "--loss",
        spec.to_str().unwrap(),
        "--p",
        "0.2,0.3,0.5",
        "--seed",
        "5",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["report"]["gap"].as_f64().unwrap() > 1e-6);
}

#[test]
fn fy_eval_shannon_matches_logsumexp() {
    let out = run(&[
        "fy-eval",
        "--negentropy",
        "shannon",
        "--k",
        "3",
        "--z",
        "0,0",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let value = v["report"]["value"].as_f64().unwrap();
    assert!((value - 3.0_f64.ln()).abs() <= 1e-12);
    assert_eq!(v["report"]["exact"], true);
}

#[test]
fn truncate_reduces_arity_and_evaluates() {
    let spec = write_spec("ce4t.json", r#"{"kind": "cross_entropy", "k": 4}"#);
    let out = run(&[
        "truncate",
        "--loss",
        spec.to_str().unwrap(),
        "--m",
        "2",
        "--eval",
        "0",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let value = v["report"]["value"].as_f64().unwrap();
    assert!(
        (value - 2.0_f64.ln()).abs() <= 1e-12,
        "binary margin loss at 0 is log 2, got {value}"
    );
}
