use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lnfold_core::graph::{load_model, save_model, NodeKind};
use serde_json::Value;

fn lnfold(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lnfold"))
        .args(args)
        .current_dir(dir)
        .env_remove("LNFOLD_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_fixture(dir: &Path, name: &str) -> PathBuf {
    let out = dir.join(format!("{name}.json"));
    let o = lnfold(dir, &["fixture", name, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

#[test]
fn analyze_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), "pre_ln_gpt");
    write_fixture(dir.path(), "post_ln");

    let o = lnfold(dir.path(), &["analyze", "pre_ln_gpt.json"]);
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("LN=5 foldable=0"), "{}", stderr(&o));
    let rep: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rep["foldable"].as_array().unwrap().len(), 0);

    let o = lnfold(dir.path(), &["analyze", "pre_ln_gpt.json", "--practical"]);
    assert!(stderr(&o).contains("foldable=5 (all)"));
    assert!(stderr(&o).contains("insertions=1"));

    let o = lnfold(dir.path(), &["analyze", "post_ln.json"]);
    assert!(stderr(&o).contains("LN=2 foldable=2 (all)"));
}

#[test]
fn analyze_output_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), "pre_ln_gpt");
    let a = lnfold(dir.path(), &["analyze", "pre_ln_gpt.json", "--practical"]);
    let b = lnfold(dir.path(), &["analyze", "pre_ln_gpt.json", "--practical"]);
    assert_eq!(a.stdout, b.stdout);
    assert!(!a.stdout.is_empty());
}

#[test]
fn missing_model_is_an_operational_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = lnfold(dir.path(), &["analyze", "nope.json"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("nope.json"));
}

#[test]
fn fold_writes_rms_model_and_verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), "post_ln");
    let o = lnfold(dir.path(), &["analyze", "post_ln.json", "--out", "report.json"]);
    assert_eq!(code(&o), 0);
    let o = lnfold(
        dir.path(),
        &["fold", "post_ln.json", "--report", "report.json", "--out", "folded.json"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (g, _) = load_model(&dir.path().join("folded.json"), &dir.path().join("folded.bin")).unwrap();
    assert!(matches!(g.node("ln1").unwrap().kind, NodeKind::RmsNorm { .. }));

    let o = lnfold(dir.path(), &["verify", "post_ln.json", "folded.json", "--grad"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["pass"], Value::Bool(true));
    assert!(v["equivalence"]["max_abs_grad_diff"].as_f64().unwrap() <= 1e-9);
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), "post_ln");
    let o = lnfold(dir.path(), &["fold", "post_ln.json", "--dry-run"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("replace")).count(), 2);
    let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(files.len(), 2);
}

#[test]
fn stale_report_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), "linear_ln");
    let o = lnfold(dir.path(), &["analyze", "linear_ln.json", "--out", "report.json"]);
    assert_eq!(code(&o), 0);
    let o = lnfold(dir.path(), &["fixture", "linear_ln", "--seed", "9", "--out", "linear_ln.json"]);
    assert_eq!(code(&o), 0);
    let o = lnfold(
        dir.path(),
        &["fold", "linear_ln.json", "--report", "report.json", "--out", "f.json"],
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("hashes to"), "{}", stderr(&o));
}

#[test]
fn unsafe_fold_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), "fan_out_trap");
    let o = lnfold(dir.path(), &["analyze", "fan_out_trap.json"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("act"));
    let o = lnfold(dir.path(), &["fold", "fan_out_trap.json", "--out", "f.json"]);
    assert_eq!(code(&o), 1);
    let o = lnfold(
        dir.path(),
        &["fold", "fan_out_trap.json", "--no-strict-safety", "--out", "f.json"],
    );
    assert_eq!(code(&o), 0);
    // the fold went through but the model changed
    let o = lnfold(dir.path(), &["verify", "fan_out_trap.json", "f.json"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn corrupted_weight_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), "post_ln");
    let o = lnfold(dir.path(), &["fold", "post_ln.json", "--out", "folded.json"]);
    assert_eq!(code(&o), 0);
    let (t, b) = (dir.path().join("folded.json"), dir.path().join("folded.bin"));
    let (g, mut w) = load_model(&t, &b).unwrap();
    w.get_mut("skip1.b").unwrap().data_mut()[0] += 0.5;
    save_model(&g, &w, &t, &b).unwrap();
    let o = lnfold(dir.path(), &["verify", "post_ln.json", "folded.json"]);
    assert_eq!(code(&o), 2);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["pass"], Value::Bool(false));
}

#[test]
fn practical_fold_needs_flag() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), "pre_ln_gpt");
    let o = lnfold(dir.path(), &["analyze", "pre_ln_gpt.json", "--practical", "--out", "r.json"]);
    assert_eq!(code(&o), 0);
    let o = lnfold(dir.path(), &["fold", "pre_ln_gpt.json", "--report", "r.json", "--out", "f.json"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("allow_practical") || stderr(&o).contains("practical"));
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), "pre_ln_gpt");
    let o = lnfold(
        dir.path(),
        &["pipeline", "pre_ln_gpt.json", "--practical", "--out", "f.json", "--report-out", "r.json", "--trials", "20"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("r.json").exists());
    assert!(dir.path().join("f.bin").exists());
}

#[test]
fn seed_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), "linear_ln");
    let o = Command::new(env!("CARGO_BIN_EXE_lnfold"))
        .args(["verify", "linear_ln.json", "linear_ln.json", "--trials", "2"])
        .current_dir(dir.path())
        .env("LNFOLD_SEED", "42")
        .output()
        .unwrap();
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["equivalence"]["seed"], 42);
}

#[test]
fn flops_match_tables() {
    let dir = tempfile::tempdir().unwrap();
    let o = lnfold(dir.path(), &["flops", "--d", "8", "--variant", "naive"]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let triple = |k: &str| {
        (
            v[k]["adds"].as_u64().unwrap(),
            v[k]["muls"].as_u64().unwrap(),
            v[k]["divs"].as_u64().unwrap(),
        )
    };
    assert_eq!(triple("ln"), (40, 16, 8));
    assert_eq!(triple("rms"), (8, 16, 8));

    let o = lnfold(dir.path(), &["flops", "--d", "64", "--variant", "welford", "--groups", "4"]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["ln"]["muls"], 220);
    assert_eq!(v["rms"]["divs"], 0);

    assert_eq!(code(&lnfold(dir.path(), &["flops", "--d", "0"])), 1);
    assert_eq!(code(&lnfold(dir.path(), &["flops", "--d", "8", "--variant", "welford"])), 1);
    assert_eq!(code(&lnfold(dir.path(), &["flops"])), 1);
}
