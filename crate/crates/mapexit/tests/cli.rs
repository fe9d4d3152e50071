//! End-to-end tests against the compiled binary: exit codes, byte
//! determinism of machine output, thread-cap independence of the
//! simulator, and the self-check subcommand.

use std::process::{Command, Output};

const SCALAR_BM: &str = r#"{
    "states": 1,
    "Q": [[0.0]],
    "kill_rate": 0.0,
    "phases": [{"drift": 0.0, "sigma": 1.4142135623730951}]
}"#;

const SCALAR_KILLED: &str = r#"{
    "states": 1,
    "Q": [[0.0]],
    "kill_rate": 1.0,
    "phases": [{"drift": 0.0, "sigma": 1.4142135623730951}]
}"#;

const CANONICAL: &str = r#"{
    "states": 2,
    "Q": [[-1.0, 1.0], [1.0, -1.0]],
    "kill_rate": 0.0,
    "phases": [
        {"drift": 1.0, "sigma": 1.0},
        {"drift": -2.0, "sigma": 1.0}
    ]
}"#;

fn model_file(dir: &tempfile::TempDir, name: &str, json: &str) -> String {
    let p = dir.path().join(name);
    std::fs::write(&p, json).unwrap();
    p.to_string_lossy().into_owned()
}

fn run(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mapexit"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout_of(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn exit_codes_cover_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let bm = model_file(&dir, "bm.json", SCALAR_BM);

    // Usage errors: unknown subcommand, and a domain violation.
    assert_eq!(run(&["no-such-command"], &[]).status.code(), Some(1));
    let o = run(
        &["exit", &bm, "two-sided-down", "--alpha", "1", "--x", "2", "--a", "1"],
        &[],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(
        String::from_utf8_lossy(&o.stderr).contains("x must lie in [0, a]"),
        "domain message names the violated constraint"
    );

    // Validation errors: unreadable file, invalid model.
    let missing = dir.path().join("nope.json");
    let o = run(&["validate", missing.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    let bad = model_file(
        &dir,
        "bad.json",
        r#"{"states":1,"Q":[[0.5]],"phases":[{"drift":1.0,"sigma":1.0}]}"#,
    );
    let o = run(&["validate", &bad], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("violation"));

    // Numerical errors: downward passage needs a transient model.
    let o = run(&["exit", &bm, "first-down", "--alpha", "0.5", "--x", "1"], &[]);
    assert_eq!(o.status.code(), Some(3));

    // And the happy path exits 0.
    let o = run(&["validate", &bm], &[]);
    assert_eq!(o.status.code(), Some(0), "{:?}", o);
}

#[test]
fn exit_csv_bytes_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let bm = model_file(&dir, "bm.json", SCALAR_BM);
    let args = ["exit", &bm, "two-sided-up", "--a", "1", "--b", "1"];
    let first = run(&args, &[]);
    let second = run(&args, &[]);
    assert_eq!(first.status.code(), Some(0));
    assert_eq!(first.stdout, second.stdout, "identical bytes across runs");
    let text = stdout_of(&first);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("row_phase,col_phase,value"));
    assert_eq!(lines.next(), Some("0,0,5.0000000000000000e-1"));
}

#[test]
fn scale_grid_csv_shape() {
    let dir = tempfile::tempdir().unwrap();
    let killed = model_file(&dir, "killed.json", SCALAR_KILLED);
    let o = run(&["scale", &killed, "--x", "0.5,1.0"], &[]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout_of(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "x,row_phase,col_phase,value");
    assert_eq!(lines.len(), 3);
    let w_half: f64 = lines[1].rsplit(',').next().unwrap().parse().unwrap();
    assert!((w_half - 0.5f64.sinh()).abs() <= 1e-12, "W(0.5) = {w_half}");
}

#[test]
fn simulate_json_is_thread_cap_independent() {
    let dir = tempfile::tempdir().unwrap();
    let canonical = model_file(&dir, "canonical.json", CANONICAL);
    let args = [
        "simulate",
        &canonical,
        "two-sided-up",
        "--a",
        "1",
        "--b",
        "1",
        "--paths",
        "2000",
        "--dt",
        "1e-2",
        "--seed",
        "9",
    ];
    let one = run(&args, &[("MAPEXIT_THREADS", "1")]);
    let three = run(&args, &[("MAPEXIT_THREADS", "3")]);
    assert_eq!(one.status.code(), Some(0), "{:?}", one);
    assert_eq!(
        one.stdout, three.stdout,
        "worker count must not change the estimate"
    );

    let v: serde_json::Value = serde_json::from_str(&stdout_of(&one)).unwrap();
    assert_eq!(v["n_paths"], 2000);
    assert_eq!(v["seed"], 9);
    assert_eq!(v["dt"], 1e-2);
    assert_eq!(v["censored"], 0);
    let mean = v["mean"].as_array().unwrap();
    assert_eq!(mean.len(), 2);
    assert_eq!(mean[0].as_array().unwrap().len(), 2);
    assert!(v["stderr"][0][0].as_f64().unwrap() > 0.0);
}

#[test]
fn verify_subcommand_passes_and_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let canonical = model_file(&dir, "canonical.json", CANONICAL);
    let o = run(
        &[
            "verify", &canonical, "--paths", "600", "--dt", "1e-2", "--seed", "7",
        ],
        &[],
    );
    let human = String::from_utf8_lossy(&o.stderr);
    assert_eq!(o.status.code(), Some(0), "verify failed:\n{human}");
    let report: serde_json::Value = serde_json::from_str(&stdout_of(&o)).unwrap();
    assert_eq!(report["all_pass"], true);
    assert_eq!(report["failed"], 0);
    assert!(report["passed"].as_u64().unwrap() >= 10);
    assert!(human.contains("pass"), "human summary goes to stderr");
}
