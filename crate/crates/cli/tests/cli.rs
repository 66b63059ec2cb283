use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn srsq(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srsq"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn srsq")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write(dir: &Path, name: &str, body: &str) {
    fs::write(dir.join(name), body).unwrap();
}

#[test]
fn gen_pop_writes_header_plus_rows_deterministically() {
    let dir = TempDir::new().unwrap();
    write(
        dir.path(),
        "spec.json",
        r#"{"n_schools": 10000, "seed": 11}"#,
    );
    let stdout = ok(&srsq(&["gen-pop", "spec.json", "a.csv"], dir.path()));
    assert!(stdout.contains("N = 10000"));
    ok(&srsq(&["gen-pop", "spec.json", "b.csv"], dir.path()));
    let a = fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.csv")).unwrap());
    assert_eq!(a.iter().filter(|&&b| b == b'\n').count(), 10_001);
}

#[test]
fn gen_pop_reports_target_correlation() {
    let dir = TempDir::new().unwrap();
    write(
        dir.path(),
        "spec.json",
        r#"{"n_schools": 10000, "seed": 2, "correlation": [[1,0.5,0],[0.5,1,0],[0,0,1]]}"#,
    );
    let stdout = ok(&srsq(&["gen-pop", "spec.json", "p.csv"], dir.path()));
    let row = stdout
        .lines()
        .find(|l| l.starts_with("var_a") && l.contains("1.0000"))
        .unwrap();
    let r_ab: f64 = row.split_whitespace().nth(2).unwrap().parse().unwrap();
    assert!((r_ab - 0.5).abs() < 0.05, "{r_ab}");
}

#[test]
fn gen_pop_rejects_bad_spec() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "spec.json", r#"{"n_schools": 0}"#);
    let out = srsq(&["gen-pop", "spec.json", "p.csv"], dir.path());
    assert!(!out.status.success());
    write(
        dir.path(),
        "spec.json",
        r#"{"n_schools": 10, "correlation": [[1,2,0],[2,1,0],[0,0,1]]}"#,
    );
    assert!(!srsq(&["gen-pop", "spec.json", "p.csv"], dir.path())
        .status
        .success());
}

fn grouped_population(dir: &Path) {
    write(dir, "spec.json", r#"{"n_schools": 1200, "seed": 4}"#);
    ok(&srsq(&["gen-pop", "spec.json", "raw.csv"], dir));
    let raw = fs::read_to_string(dir.join("raw.csv")).unwrap();
    let mut lines = raw.lines();
    let mut body = format!("{}\n", lines.next().unwrap());
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let (group, c) = match i {
            0..=799 => ("G1", f[4]),
            800..=1099 => ("G2", f[4]),
            // Constant variable: this group must land in the skip log.
            _ => ("G3", "7"),
        };
        body.push_str(&format!("{},{},{},{},{}\n", f[0], group, f[2], f[3], c));
    }
    write(dir, "pop.csv", &body);
}

#[test]
fn simulate_is_deterministic_and_writes_layout() {
    let dir = TempDir::new().unwrap();
    grouped_population(dir.path());
    write(
        dir.path(),
        "cfg.json",
        r#"{"population": {"csv": "pop.csv"}, "replications": 1, "master_seed": 9, "output_dir": "run1"}"#,
    );
    let stdout = ok(&srsq(&["simulate", "cfg.json", "--jobs", "1"], dir.path()));
    assert!(stdout.contains("== national (N=1200)"));
    let out = srsq(
        &["simulate", "cfg.json", "--jobs", "3", "--out", "run2"],
        dir.path(),
    );
    let stderr = String::from_utf8_lossy(&out.stderr).to_string();
    ok(&out);
    assert!(stderr.contains("skipped G3"), "{stderr}");

    let base = dir.path();
    for f in [
        "metrics.csv",
        "results.json",
        "skipped.json",
        "national/averaged.json",
        "G2/perm6/report.json",
    ] {
        let a = fs::read(base.join("run1").join(f)).unwrap();
        assert_eq!(a, fs::read(base.join("run2").join(f)).unwrap(), "{f}");
    }
    for p in 1..=6 {
        assert!(base.join(format!("run1/G1/perm{p}/report.json")).is_file());
    }
    assert!(!base.join("run1/G3").exists());

    let metrics = fs::read_to_string(base.join("run1/metrics.csv")).unwrap();
    assert!(metrics.starts_with(
        "population,N,permutation,method,role,bias_signed,bias_abs,variance,mse,contacted,excluded,invited,declined,agreed,achieved_n,feasible\n"
    ));
    // 3 populations x (6 + averaged) x 2 methods x 3 roles, plus header.
    assert_eq!(metrics.lines().count(), 1 + 3 * 7 * 2 * 3);
    let g2 = metrics.lines().find(|l| l.starts_with("G2,300,")).unwrap();
    assert!(g2.ends_with(",true"));
}

#[test]
fn overrides_change_results() {
    let dir = TempDir::new().unwrap();
    grouped_population(dir.path());
    write(
        dir.path(),
        "cfg.json",
        r#"{"population": {"csv": "pop.csv"}, "by_group": false, "replications": 3, "permutations": [2]}"#,
    );
    ok(&srsq(&["simulate", "cfg.json", "--out", "a"], dir.path()));
    ok(&srsq(
        &["simulate", "cfg.json", "--out", "b", "--seed", "1"],
        dir.path(),
    ));
    ok(&srsq(
        &[
            "simulate",
            "cfg.json",
            "--out",
            "c",
            "--replications",
            "1",
            "--trace",
        ],
        dir.path(),
    ));
    let read = |d: &str| fs::read_to_string(dir.path().join(d).join("metrics.csv")).unwrap();
    assert_ne!(read("a"), read("b"));
    let trace = fs::read_to_string(dir.path().join("c/trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 2);
}

#[test]
fn simulate_fails_on_unreadable_input() {
    let dir = TempDir::new().unwrap();
    write(
        dir.path(),
        "cfg.json",
        r#"{"population": {"csv": "missing.csv"}}"#,
    );
    assert!(!srsq(&["simulate", "cfg.json"], dir.path()).status.success());
    write(
        dir.path(),
        "bad.json",
        r#"{"population": {"csv": "x.csv"}, "replication": 5}"#,
    );
    assert!(!srsq(&["simulate", "bad.json"], dir.path()).status.success());
}

#[test]
fn report_emits_sorted_series() {
    let dir = TempDir::new().unwrap();
    grouped_population(dir.path());
    write(
        dir.path(),
        "cfg.json",
        r#"{"population": {"csv": "pop.csv"}, "replications": 5, "output_dir": "res"}"#,
    );
    ok(&srsq(&["simulate", "cfg.json"], dir.path()));
    ok(&srsq(
        &["report", "res", "--figure", "achieved_n"],
        dir.path(),
    ));
    let csv = fs::read_to_string(dir.path().join("res/figures/achieved_n.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "population,N,srs,srsq");
    assert!(rows[1].starts_with("G2,300,"));
    assert!(rows[2].starts_with("G1,800,"));
    assert!(rows[3].starts_with("national,1200,"));
}

#[test]
fn report_on_empty_dir_fails_without_output() {
    let dir = TempDir::new().unwrap();
    let out = srsq(&["report", ".", "--figure", "aux_bias"], dir.path());
    assert!(!out.status.success());
    assert!(!dir.path().join("figures").exists());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    assert!(!srsq(&["report", ".", "--figure", "bogus"], dir.path())
        .status
        .success());
}
