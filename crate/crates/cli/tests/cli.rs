use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn lsyk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lsyk")).args(args).env_remove("LSYK_WORKERS").output().unwrap()
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    let mut a: Vec<&str> = args.to_vec();
    a.extend(["--out-dir", dir.to_str().unwrap()]);
    lsyk(&a)
}

fn data_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn n4_spectrum_has_eight_rows() {
    let d = tempfile::tempdir().unwrap();
    let out = run_in(d.path(), &["spectrum", "--n", "4", "--q", "4", "--seed", "7", "--mu", "0.05"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = data_rows(&d.path().join("spectrum.csv"));
    assert_eq!(rows.len(), 8);
    let text = fs::read_to_string(d.path().join("spectrum.csv")).unwrap();
    assert!(text.starts_with("# lsyk "));
    assert!(text.contains("# config_sha256: "));
    assert!(text.contains("# tolerances: "));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(lsyk(&["spectrum", "--n", "4", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(lsyk(&["spectrum", "--n", "four", "--mu", "0.1"]).status.code(), Some(2));
    assert_eq!(lsyk(&["frobnicate"]).status.code(), Some(2));
    let d = tempfile::tempdir().unwrap();
    assert_eq!(run_in(d.path(), &["spectrum", "--mu", "0.1"]).status.code(), Some(2));
    assert_eq!(run_in(d.path(), &["spectrum", "--n", "5", "--mu", "0.1"]).status.code(), Some(2));
    assert_eq!(run_in(d.path(), &["spectrum", "--n", "4", "--mu", "-0.1"]).status.code(), Some(2));
    assert_eq!(run_in(d.path(), &["sd-solve", "--mu", "0.1", "--m", "8"]).status.code(), Some(2));
    assert_eq!(run_in(d.path(), &["sd-solve", "--mu", "0.1", "--decay-t", "10", "--fit-window", "2,8"]).status.code(), Some(2));
    let bad_env = Command::new(env!("CARGO_BIN_EXE_lsyk"))
        .args(["oracle", "--out-dir", d.path().to_str().unwrap()])
        .env("LSYK_WORKERS", "many")
        .output()
        .unwrap();
    assert_eq!(bad_env.status.code(), Some(2));
}

#[test]
fn config_file_and_flag_precedence() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.toml");
    fs::write(&cfg, "command = \"spectrum\"\nn = 6\nq = 4\nseed = 7\nmu_list = [0.05]\n").unwrap();
    let out = run_in(&d.path().join("a"), &["spectrum", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(data_rows(&d.path().join("a/spectrum.csv")).len(), 32);
    let out = run_in(&d.path().join("b"), &["spectrum", "--config", cfg.to_str().unwrap(), "--n", "4"]);
    assert!(out.status.success());
    assert_eq!(data_rows(&d.path().join("b/spectrum.csv")).len(), 8);

    fs::write(&cfg, "n = 4\nmu = [0.05]\nunknown_key = 1\n").unwrap();
    assert_eq!(run_in(d.path(), &["spectrum", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    fs::write(&cfg, "command = \"oracle\"\nn = 4\nmu = [0.05]\n").unwrap();
    assert_eq!(run_in(d.path(), &["spectrum", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn json_format() {
    let d = tempfile::tempdir().unwrap();
    let out = run_in(d.path(), &["gap-scan", "--n", "4", "--mu", "0.05,0.3", "--format", "json"]);
    assert!(out.status.success());
    let v = json(&d.path().join("gaps.json"));
    assert_eq!(v["header"]["command"], "gap-scan");
    let rows = v["data"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        let (g, o) = (r["gamma0"].as_f64().unwrap(), r["oracle_gamma0"].as_f64().unwrap());
        assert!((g - o).abs() < 1e-9);
    }
}

#[test]
fn ep_scan_n4_oracle_and_determinism() {
    let d = tempfile::tempdir().unwrap();
    let args = ["ep-scan", "--n", "4", "--seed", "3", "--mu-range", "0,0.8,33"];
    assert!(run_in(&d.path().join("a"), &args).status.success());
    let mut args_b = args.to_vec();
    args_b.extend(["--workers", "1"]);
    assert!(run_in(&d.path().join("b"), &args_b).status.success());
    let cmp = json(&d.path().join("a/oracle_comparison.json"))["data"].clone();
    assert_eq!(cmp["ep"]["pass"], true, "{cmp}");
    assert_eq!(cmp["ep"]["in_grid"], true);
    assert!(cmp["ep"]["events"][0]["abs_error"].as_f64().unwrap() < 1e-6);
    assert_eq!(cmp["gamma0"]["pass"], true);
    assert_eq!(cmp["eigenvalues"]["pass"], true);
    for f in ["traces.csv", "events.json", "real_counts.csv", "oracle_comparison.json"] {
        let a = fs::read(d.path().join("a").join(f)).unwrap();
        let b = fs::read(d.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between runs");
    }
}

#[test]
fn weak_coupling_grid_has_no_ep() {
    let d = tempfile::tempdir().unwrap();
    assert!(run_in(d.path(), &["ep-scan", "--n", "4", "--seed", "3", "--mu-range", "0,0.02,5"]).status.success());
    let v = json(&d.path().join("events.json"));
    assert!(v["data"]["events"].as_array().unwrap().is_empty());
}

#[test]
fn ep_scan_n8_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let args = ["ep-scan", "--n", "8", "--seed", "5", "--mu-range", "0.05,0.5,10", "--k", "64"];
    assert!(run_in(&d.path().join("a"), &args).status.success());
    assert!(run_in(&d.path().join("b"), &args).status.success());
    for f in ["traces.csv", "events.json", "real_counts.csv"] {
        assert_eq!(fs::read(d.path().join("a").join(f)).unwrap(), fs::read(d.path().join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn scaling_with_n4_only_follows_closed_form() {
    let d = tempfile::tempdir().unwrap();
    let out = run_in(d.path(), &["scaling", "--n-list", "4", "--mu", "0.05,0.1,0.2,0.4", "--samples", "40", "--base-seed", "9"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = data_rows(&d.path().join("per_size.csv"));
    assert_eq!(rows.len(), 4);
    for r in rows {
        let (mean, oracle): (f64, f64) = (r[2].parse().unwrap(), r[5].parse().unwrap());
        assert!((mean - oracle).abs() < 1e-9, "{r:?}");
    }
    assert!(d.path().join("journal.jsonl").exists());
}

#[test]
fn corrupt_journal_is_an_error() {
    let d = tempfile::tempdir().unwrap();
    let journal = d.path().join("j.jsonl");
    fs::write(&journal, "{\"n\": 4, not json\n").unwrap();
    let out = run_in(d.path(), &["scaling", "--n-list", "4", "--mu", "0.1", "--samples", "2", "--journal", journal.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    assert!(d.path().join("INCOMPLETE").exists());
}

#[test]
fn scaling_resumes_from_journal() {
    let d = tempfile::tempdir().unwrap();
    let args = ["scaling", "--n-list", "4,6,8", "--mu", "0.1,0.3", "--samples", "3"];
    assert!(run_in(&d.path().join("a"), &args).status.success());
    assert!(run_in(&d.path().join("a"), &args).status.success());
    let v = json(&d.path().join("a/gap_curve.json"));
    assert_eq!(v["data"]["resumed"], 18);
    assert!(run_in(&d.path().join("b"), &args).status.success());
    assert_eq!(fs::read(d.path().join("a/scaling.csv")).unwrap(), fs::read(d.path().join("b/scaling.csv")).unwrap());
}

#[test]
fn oracle_command_passes() {
    let d = tempfile::tempdir().unwrap();
    let out = run_in(d.path(), &["oracle", "--samples", "20000"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 5, "{text}");
}

#[test]
fn sd_solve_outputs_and_fig2_export() {
    let d = tempfile::tempdir().unwrap();
    let sd = d.path().join("sd");
    let out = run_in(&sd, &["sd-solve", "--mu", "0.2,0.4", "--t", "1,2", "--m", "32", "--decay-t", "16", "--decay-m", "64", "--fit-window", "2,6"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["actions.csv", "solves.jsonl", "transitions.json", "gamma0.csv", "decay.json", "g_pp/mu_0.2.csv", "g_pp/mu_0.4.csv"] {
        assert!(sd.join(f).exists(), "{f}");
    }
    assert_eq!(data_rows(&sd.join("actions.csv")).len(), 4);
    let sc = d.path().join("sc");
    let decay = sd.join("decay.json");
    let out = run_in(&sc, &["scaling", "--n-list", "4,6,8", "--mu", "0.1,0.2,0.4", "--samples", "2", "--sd-results", decay.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = data_rows(&sc.join("fig2.csv"));
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| !r[1].is_empty()));
    let report = json(&sc.join("fig2_report.json"));
    assert!(report["data"]["note"].is_string());
}

#[test]
fn sd_solve_transition_reports() {
    let d = tempfile::tempdir().unwrap();
    let out = run_in(d.path(), &["sd-solve", "--mu", "0.15,0.35", "--t-range", "2,10,9", "--m", "100", "--decay-t", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&d.path().join("transitions.json"));
    let rows = v["data"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["mu"], 0.15);
    assert_eq!(rows[0]["transition"]["verdict"], "first_order");
    assert_eq!(rows[0]["distinct_branches"], 2);
    let t_star = rows[0]["transition"]["t_star"].as_f64().unwrap();
    assert!(t_star > 2.0 && t_star < 10.0);
    assert_eq!(rows[1]["transition"]["verdict"], "crossover");
    assert_eq!(rows[1]["distinct_branches"], 1);
}
