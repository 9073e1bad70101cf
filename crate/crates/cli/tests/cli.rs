use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn revsnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_revsnn"))
        .args(args)
        .env_remove("REVSNN_SEED")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn json(args: &[&str]) -> Value {
    let mut all = vec!["--format", "json"];
    all.extend_from_slice(args);
    let out = revsnn(&all);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn column<'a>(report: &'a Value, name: &str) -> Vec<&'a Value> {
    let i = report["columns"].as_array().unwrap().iter().position(|c| c == name).unwrap();
    report["rows"].as_array().unwrap().iter().map(|r| &r[i]).collect()
}

#[test]
fn roundtrip_defaults_pass() {
    let out = revsnn(&["roundtrip"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("# command: roundtrip"));
    assert!(text.contains("# verdict roundtrip: PASS"));
}

#[test]
fn usage_errors_exit_2() {
    for args in [
        &["roundtrip", "--groups", "3", "--dim", "128"][..],
        &["roundtrip", "--dim", "0"],
        &["roundtrip", "--no-such-flag"],
        &["bench-time", "--repeats", "0"],
        &["bench-memory", "--arch", ""],
        &["bench-memory", "--timesteps", "5..2"],
        &["gradcheck", "--strategy", "a0"],
        &["train", "--data", "idx:/definitely/not/here"],
        &["train", "--data", "csv:whatever"],
        &["--format", "xml", "flops"],
        &["frobnicate"],
    ] {
        let out = revsnn(args);
        assert_eq!(code(&out), 2, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn gradcheck_reports_every_strategy_and_fd_rows() {
    let report = json(&["gradcheck", "--strategy", "all", "--nets", "3"]);
    let strategies = column(&report, "strategy");
    for s in ["a1", "b", "c"] {
        assert!(strategies.iter().any(|v| *v == s));
    }
    assert_eq!(report["verdicts"][0]["passed"], true);

    let report = json(&["gradcheck", "--strategy", "c", "--fd", "--nets", "2"]);
    assert!(column(&report, "reference").iter().any(|v| *v == "fd"));
    assert!(report["verdicts"].as_array().unwrap().iter().any(|v| v["name"] == "finite_difference"));
}

#[test]
fn gradcheck_fails_when_the_verdict_does() {
    // finite differences cannot reach this tolerance
    let out = revsnn(&["gradcheck", "--strategy", "c", "--fd", "--nets", "1", "--fd-rtol", "1e-15"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("finite_difference: FAIL"));
}

#[test]
fn flops_table_for_k_1000() {
    let report = json(&["flops", "--k", "1000"]);
    let text = report.to_string();
    for v in ["12000", "17000", "15500", "8500", "44500", "25500"] {
        assert!(text.contains(v), "missing {v}");
    }
    assert!(report["verdicts"].as_array().unwrap().iter().all(|v| v["passed"] == true));
}

#[test]
fn memory_census_shapes() {
    let report = json(&["bench-memory", "--timesteps", "1..20", "--mode", "both"]);
    assert!(report["verdicts"].as_array().unwrap().iter().all(|v| v["passed"] == true));

    let report = json(&["bench-memory", "--timesteps", "1,2", "--mode", "stored"]);
    let t = column(&report, "timesteps");
    let total = column(&report, "total_elements");
    let at = |step: u64| -> Vec<u64> { (0..t.len()).filter(|&i| t[i] == step).map(|i| total[i].as_u64().unwrap()).collect() };
    let (one, two) = (at(1), at(2));
    assert!(!one.is_empty() && one.len() == two.len());
    for (a, b) in one.iter().zip(&two) {
        assert_eq!(*b, 2 * a);
    }
}

#[test]
fn bench_time_is_measurement_only() {
    let report = json(&[
        "bench-time", "--strategy", "a1,c", "--timesteps", "2", "--repeats", "2", "--depth", "2", "--dim", "64",
    ]);
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
    assert!(report["verdicts"].as_array().unwrap().is_empty());
}

#[test]
fn seed_flag_and_env_agree_and_out_writes_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let args = ["roundtrip", "--trials", "3", "--out"];
    let mut with_flag = args.to_vec();
    with_flag.extend([a.to_str().unwrap(), "--seed", "9"]);
    assert_eq!(code(&revsnn(&with_flag)), 0);
    let mut with_env = args.to_vec();
    with_env.push(b.to_str().unwrap());
    let out = Command::new(env!("CARGO_BIN_EXE_revsnn"))
        .args(&with_env)
        .env("REVSNN_SEED", "9")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert!(out.stdout.is_empty());
    let text = std::fs::read_to_string(&a).unwrap();
    assert!(text.contains("\"seed\":9"));
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
}

fn train(dir: &Path, name: &str, extra: &[&str]) -> Vec<u8> {
    let path = dir.join(name);
    let mut args = vec!["train", "--samples", "256", "--batch-size", "64", "--checkpoint", path.to_str().unwrap()];
    args.extend_from_slice(extra);
    let out = revsnn(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    std::fs::read(path).unwrap()
}

#[test]
fn training_resume_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = train(dir.path(), "full", &["--epochs", "3"]);
    train(dir.path(), "part", &["--epochs", "2"]);
    let part = dir.path().join("part");
    let resumed = train(dir.path(), "resumed", &["--epochs", "1", "--resume", part.to_str().unwrap()]);
    assert_eq!(full, resumed);
}

#[test]
fn damaged_checkpoints_are_rejected_without_panicking() {
    let dir = tempfile::tempdir().unwrap();
    let good = train(dir.path(), "good", &["--epochs", "1"]);
    let bad = dir.path().join("bad");
    for damaged in [good[..good.len() / 2].to_vec(), b"not a checkpoint".to_vec(), Vec::new()] {
        std::fs::write(&bad, damaged).unwrap();
        let out = revsnn(&["train", "--samples", "256", "--resume", bad.to_str().unwrap()]);
        assert_eq!(code(&out), 2);
        assert!(!String::from_utf8_lossy(&out.stderr).contains("panicked"));
    }
}
