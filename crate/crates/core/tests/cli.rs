use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ktree(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ktree"))
        .args(args)
        .current_dir(dir)
        .env_remove(ktree::cli::OUT_DIR_ENV)
        .output()
        .unwrap()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn malformed_rational_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = ktree(&["perturb", "--kind", "zero", "--eta", "3/0", "--omega", "2", "--cell", "1:0"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = ktree(&["witness", "--cell", "nine"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ktree(&["validate", "--no-such-flag"], dir.path()).status.code(), Some(2));
}

#[test]
fn invalid_filtration_spec_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.json");
    std::fs::write(&spec, r#"{"kind":"explicit","levels":[[["1/2","1/3"]]]}"#).unwrap();
    let out = ktree(&["validate", "--filtration-spec", spec.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("5/6"));
}

#[test]
fn validate_passes_on_builtin_filtrations() {
    let dir = tempfile::tempdir().unwrap();
    for f in ["dyadic", "biased:1/3", "delayed:3"] {
        let out = ktree(&["validate", "--filtration", f, "--depth", "9"], dir.path());
        assert_eq!(out.status.code(), Some(0), "{f}");
        assert_eq!(json(&out)["passed"], Value::Bool(true));
    }
}

#[test]
fn witness_reads_construction_from_build_report() {
    let dir = tempfile::tempdir().unwrap();
    let built = ktree(&["build", "--kind", "ui_divergent", "--N", "2", "--depth", "8"], dir.path());
    assert_eq!(built.status.code(), Some(0));
    let report = dir.path().join("build.json");
    std::fs::write(&report, &built.stdout).unwrap();
    let from = ktree(&["witness", "--from", report.to_str().unwrap(), "--cell", "3:5", "--certify", "limsup>=3"], dir.path());
    let flags = ktree(&["witness", "--kind", "ui_divergent", "--N", "2", "--cell", "3:5", "--certify", "limsup>=3"], dir.path());
    assert_eq!(from.status.code(), Some(0));
    assert_eq!(from.stdout, flags.stdout);
}

#[test]
fn perturb_report_carries_exact_values() {
    let dir = tempfile::tempdir().unwrap();
    let out = ktree(
        &["perturb", "--kind", "zero", "--eta", "1", "--omega", "2", "--cell", "1:0", "--variant", "singular"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["alpha"], "3");
    assert_eq!(v["alpha_prime"], "-3");
    assert_eq!(v["mass_F"], "1/16");
    assert_eq!(v["norm"], "3/8");
    assert_eq!(v["norm"], v["norm_measured"]);
    assert!(v["checks"].as_object().unwrap().values().all(|c| c == true));
}

#[test]
fn out_dir_variable_names_the_report_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ktree"))
        .args(["sample", "--trials", "20", "--format", "csv"])
        .env(ktree::cli::OUT_DIR_ENV, dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());
    let text = std::fs::read_to_string(dir.path().join("sample.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("trial,osc_num,osc_den"));
    assert_eq!(lines.count(), 20);
}

#[test]
fn explicit_out_path_wins() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("norms.json");
    let out = ktree(&["norms", "--depth", "4", "--out", target.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(target).unwrap()).unwrap();
    assert_eq!(v["command"], "norms");
}

#[test]
fn csv_is_only_for_sample() {
    let dir = tempfile::tempdir().unwrap();
    assert_ne!(ktree(&["norms", "--format", "csv"], dir.path()).status.code(), Some(0));
}

#[test]
fn failed_certificate_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = ktree(&["certify", "--kind", "zero", "--cell", "1:0", "--target", "osc>=1", "--horizon", "6"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&out)["passed"], Value::Bool(false));
}

#[test]
fn scripted_game_rejects_an_escaping_move() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("moves.json");
    // the second move widens the tolerance beyond player II's last set
    std::fs::write(
        &script,
        r#"[{"anchor_edits":[],"n":2,"eps":"1/10"},{"anchor_edits":[],"n":3,"eps":"1"}]"#,
    )
    .unwrap();
    let out = ktree(&["game", "--script", script.to_str().unwrap(), "--stages", "2"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).to_lowercase().contains("move"));
}

#[test]
fn interactive_game_reads_moves_from_stdin() {
    use std::io::Write;
    let mut child = Command::new(env!("CARGO_BIN_EXE_ktree"))
        .args(["game", "--interactive", "--stages", "2"])
        .env_remove(ktree::cli::OUT_DIR_ENV)
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let moves = "{\"anchor_edits\":[],\"n\":2,\"eps\":\"1/10\"}\n{\"anchor_edits\":[],\"n\":4,\"eps\":\"1/100\"}\n";
    child.stdin.take().unwrap().write_all(moves.as_bytes()).unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["moves"].as_array().unwrap().len(), 4);
}
