//! The `fbsvie` binary: exit codes, CSV files, run reports and reproducibility.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fbsvie"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/configs").join(name)
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().expect("binary runs")
}

fn report(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn optimal_consumption_table() {
    let dir = tempfile::tempdir().unwrap();
    let s0 = config("s0.json");
    let o = run(&["optimal-consumption", "--config", s0.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("c_star.csv")).unwrap();
    assert!(text.starts_with("t,lambda,P,c_star\n"));
    let rows = csv_rows(&dir.path().join("c_star.csv"));
    assert_eq!(rows.len(), 101);
    assert_eq!(rows[0][3], "1");
    assert_eq!(rows[50][0], "0.5");
    assert_eq!(rows[50][3], "2");
    assert_eq!(rows[100][3], "nan");
    let rep = report(dir.path());
    assert_eq!(rep["exit_code"], 0);
    assert_eq!(rep["scenario_hash"].as_str().unwrap().len(), 64);
    assert_eq!(rep["nan_outputs"].as_array().unwrap().len(), 1);
    assert!(rep["checks"][0]["pass"].as_bool().unwrap());
}

#[test]
fn corrupted_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = config("bad_pi.json");
    let o = run(&["run-acceptance", "--config", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let rep = report(dir.path());
    assert_eq!(rep["exit_code"], 2);
    assert!(rep["error"].as_str().unwrap().contains("pi"));
}

#[test]
fn config_errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let missing = write_config(
        dir.path(),
        "missing.json",
        r#"{ "xi": 1.0, "alpha_kernel": {"value": 0.05}, "beta_kernel": {"value": 0.2} }"#,
    );
    let o = run(&["optimal-consumption", "--config", missing.to_str().unwrap()], &dir.path().join("a"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("grid"));

    let ambiguous = write_config(
        dir.path(),
        "ambiguous.json",
        r#"{ "grid": {"horizon": 1.0, "n_steps": 10}, "xi": 1.0,
             "alpha_kernel": {"value": 0.05, "table": [0.05], "n": 1}, "beta_kernel": {"value": 0.2} }"#,
    );
    let o = run(&["optimal-consumption", "--config", ambiguous.to_str().unwrap()], &dir.path().join("b"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ambiguous"));

    let syntax = write_config(dir.path(), "syntax.json", "{ \"grid\": ");
    let o = run(&["optimal-consumption", "--config", syntax.to_str().unwrap()], &dir.path().join("c"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line"));

    let o = run(&["optimal-consumption"], &dir.path().join("d"));
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["optimal-consumption", "--config", "/nonexistent/s0.json"], &dir.path().join("e"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_flags_print_usage() {
    let o = bin().args(["simulate-forward", "--frobnicate"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let o = bin().arg("--help").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn forward_outputs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("s0_jumps.json");
    let args = ["simulate-forward", "--config", cfg.to_str().unwrap(), "--paths", "2000", "--control", "cstar"];
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run(&args, &a).status.code(), Some(0));
    assert_eq!(run(&args, &b).status.code(), Some(0));
    for f in ["forward.csv", "forward_oracle.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let rows = csv_rows(&a.join("forward.csv"));
    assert_eq!(rows.len(), 101);
    assert_eq!(rows[0], vec!["0", "1", "0", "1", "1", "1"]);
    let (ra, rb) = (report(&a), report(&b));
    assert_eq!(ra["scenario_hash"], rb["scenario_hash"]);
    let c = run(
        &["simulate-forward", "--config", cfg.to_str().unwrap(), "--paths", "2000", "--seed", "8"],
        &dir.path().join("c"),
    );
    assert_eq!(c.status.code(), Some(0));
    assert_ne!(report(&dir.path().join("c"))["scenario_hash"], ra["scenario_hash"]);
}

#[test]
fn hash_ignores_formatting_and_explicit_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let terse = write_config(
        dir.path(),
        "terse.json",
        r#"{"grid":{"horizon":1.0,"n_steps":100},"xi":1.0,"alpha_kernel":{"kind":"constant","value":0.05},"beta_kernel":{"kind":"constant","value":0.2},"gamma":0.0,"mc":{"n_paths":100000,"seed":42}}"#,
    );
    let explicit = write_config(
        dir.path(),
        "explicit.json",
        r#"{
            "mc": {"seed": 42, "n_paths": 100000, "n_blocks": 8},
            "gamma_sign_convention": "discounting",
            "beta_kernel": {"kind": "constant", "value": 0.2},
            "alpha_kernel": {"kind": "constant", "value": 0.05},
            "xi": 1.0,
            "grid": {"n_steps": 100, "horizon": 1.0}
        }"#,
    );
    let s0 = config("s0.json");
    let mut hashes = Vec::new();
    for (k, p) in [terse, explicit, s0].iter().enumerate() {
        let out = dir.path().join(format!("o{k}"));
        assert_eq!(run(&["optimal-consumption", "--config", p.to_str().unwrap()], &out).status.code(), Some(0));
        hashes.push(report(&out)["scenario_hash"].clone());
    }
    assert_eq!(hashes[0], hashes[1]);
    assert_eq!(hashes[0], hashes[2]);
    let out = dir.path().join("conv");
    let o = run(
        &["optimal-consumption", "--config", config("s0.json").to_str().unwrap(), "--convention", "paper_ode"],
        &out,
    );
    assert_eq!(o.status.code(), Some(0));
    assert_ne!(report(&out)["scenario_hash"], hashes[0]);
}

#[test]
fn bsvie_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let s0 = config("s0.json");
    let ok = dir.path().join("ok");
    let o = run(
        &["solve-bsvie", "--config", s0.to_str().unwrap(), "--problem", "sine", "--paths", "800"],
        &ok,
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let log = csv_rows(&ok.join("bsvie_log.csv"));
    assert!(log.len() >= 2);
    let diag = csv_rows(&ok.join("bsvie_diagonal.csv"));
    assert_eq!(diag.len(), 101);

    let stuck = dir.path().join("stuck");
    let o = run(
        &["solve-bsvie", "--config", s0.to_str().unwrap(), "--problem", "sine", "--paths", "800", "--max-iter", "2"],
        &stuck,
    );
    assert_eq!(o.status.code(), Some(4));
    let rep = report(&stuck);
    assert_eq!(rep["exit_code"], 4);
    assert!(rep["error"].as_str().unwrap().contains("2 passes"));

    let res = dir.path().join("res");
    let o = run(&["solve-bsvie", "--config", s0.to_str().unwrap(), "--problem", "resolvent"], &res);
    assert_eq!(o.status.code(), Some(0));
    let y0: f64 = csv_rows(&res.join("bsvie_diagonal.csv"))[0][1].parse().unwrap();
    assert!((y0 - 1f64.exp()).abs() < 0.01 * 1f64.exp());
}

#[test]
fn utility_and_maximum_principle_tables() {
    let dir = tempfile::tempdir().unwrap();
    let s0 = config("s0.json");
    let u = dir.path().join("u");
    let o = run(&["evaluate-utility", "--config", s0.to_str().unwrap(), "--paths", "8000"], &u);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let ranking = csv_rows(&u.join("ranking.csv"));
    assert_eq!(ranking.len(), 5);
    let oracle: Vec<f64> = ranking.iter().map(|r| r[3].parse().unwrap()).collect();
    assert!((oracle[2] - 0.015).abs() < 1e-9);

    let m = dir.path().join("m");
    let o = run(&["check-mp", "--config", s0.to_str().unwrap(), "--paths", "800"], &m);
    assert!(matches!(o.status.code(), Some(0) | Some(3)));
    let rows = csv_rows(&m.join("gateaux.csv"));
    assert_eq!(rows.len(), 10);
    let rep = report(&m);
    assert_eq!(rep["checks"].as_array().unwrap().len(), 10);
    let any_fail = rep["checks"].as_array().unwrap().iter().any(|c| c["pass"] == false);
    assert_eq!(o.status.code(), Some(if any_fail { 3 } else { 0 }));
}

#[test]
fn acceptance_subset_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let s0 = config("s0.json");
    let o = run(&["run-acceptance", "--config", s0.to_str().unwrap(), "--criteria", "1,9"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("PASS criterion 1"));
    assert!(stdout.contains("PASS criterion 9"));
    let rows = csv_rows(&dir.path().join("acceptance.csv"));
    assert!(rows.iter().all(|r| r[5] == "pass"));
    let o = run(&["run-acceptance", "--config", s0.to_str().unwrap(), "--criteria", "12"], &dir.path().join("x"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn duality_table_at_full_size() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["verify-duality", "--paths", "200000", "--seed", "7"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let rows = csv_rows(&dir.path().join("duality.csv"));
    assert_eq!(rows.len(), 6);
    for r in &rows {
        let z: f64 = r[6].parse().unwrap();
        assert!(z <= 3.0, "{r:?}");
    }
}
