use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mediate_calib::calib::ConcaveGenerator;
use mediate_calib::oracle::{DiscreteDGP, Estimand};
use mediate_calib_cli::commands::check_report_for;
use mediate_calib_cli::exit;
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mediate-calib"));
    c.env_remove("MEDIATE_CALIB_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write_sample(dir: &Path, dgp: &DiscreteDGP, n: usize, seed: u64) -> PathBuf {
    let path = dir.join("sample.csv");
    let data = dgp.sample(n, seed).unwrap();
    data.write_csv(std::fs::File::create(&path).unwrap()).unwrap();
    path
}

fn estimate_json(csv: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "estimate",
        "--input",
        csv.to_str().unwrap(),
        "--treatment",
        "t",
        "--mediator",
        "m1",
        "--outcome",
        "y",
        "--covariates",
        "x1",
        "--format",
        "json",
    ];
    args.extend_from_slice(extra);
    run(&args)
}

fn row<'a>(report: &'a Value, name: &str) -> &'a Value {
    report["estimates"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["name"] == name)
        .unwrap_or_else(|| panic!("row {name} missing"))
}

#[test]
fn estimate_end_to_end_covers_truth() {
    let dir = tempfile::tempdir().unwrap();
    let dgp = DiscreteDGP::random(11, false);
    let csv = write_sample(dir.path(), &dgp, 3000, 5);
    let out = estimate_json(&csv, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["n"], 3000);

    let truth = dgp.true_values();
    for name in ["theta0", "ate"] {
        let r = row(&report, name);
        let t = Estimand::from_name(name).unwrap().of(&truth).unwrap();
        let (lo, hi) = (r["ci_lower"].as_f64().unwrap(), r["ci_upper"].as_f64().unwrap());
        // Four standard errors: essentially never fails by chance.
        let se = r["std_error"].as_f64().unwrap();
        let mid = r["estimate"].as_f64().unwrap();
        assert!(lo < mid && mid < hi);
        assert!((mid - t).abs() < 4.0 * se, "{name}: {mid} vs truth {t} (se {se})");
    }
    for w in report["weights"].as_array().unwrap() {
        assert_eq!(w["converged"], true);
        assert!(w["balance_residual"].as_f64().unwrap() < 1e-8);
    }
}

#[test]
fn estimand_selection_limits_rows() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_sample(dir.path(), &DiscreteDGP::random(2, false), 500, 1);
    let out = estimate_json(&csv, &["--estimands", "nie"]);
    assert!(out.status.success());
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let names: Vec<&str> = report["estimates"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["name"].as_str().unwrap())
        .collect();
    assert!(names.contains(&"nie") && names.contains(&"ate"));
    assert!(!names.contains(&"nde") && !names.contains(&"ndeu") && !names.contains(&"pie"));
}

#[test]
fn prior_mediator_adds_path_rows() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_sample(dir.path(), &DiscreteDGP::random(4, true), 2000, 2);
    let out = estimate_json(&csv, &["--prior-mediator", "w1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let sum: f64 = ["path_w", "path_m", "direct"]
        .iter()
        .map(|n| row(&report, n)["estimate"].as_f64().unwrap())
        .sum();
    let ate = row(&report, "ate")["estimate"].as_f64().unwrap();
    assert!((sum - ate).abs() < 1e-9, "{sum} vs {ate}");
}

#[test]
fn missing_outcome_column_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_sample(dir.path(), &DiscreteDGP::random(1, false), 200, 1);
    let out = run(&[
        "estimate",
        "--input",
        csv.to_str().unwrap(),
        "--treatment",
        "t",
        "--mediator",
        "m1",
        "--outcome",
        "income",
        "--covariates",
        "x1",
    ]);
    assert_eq!(out.status.code(), Some(exit::INPUT));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("schema mismatch") && err.contains("income"), "{err}");
    assert!(out.stdout.is_empty());
}

#[test]
fn missing_file_and_bad_flags_are_input_errors() {
    let out = run(&["estimate", "--input", "/no/such/file.csv", "--treatment", "t", "--outcome", "y"]);
    assert_eq!(out.status.code(), Some(exit::INPUT));
    assert_eq!(run(&["estimate", "--rho", "bogus"]).status.code(), Some(exit::INPUT));
    assert_eq!(run(&["simulate", "--level", "1.5"]).status.code(), Some(exit::INPUT));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(exit::INPUT));
}

#[test]
fn single_replication_is_rejected() {
    let out = run(&["simulate", "--replications", "1"]);
    assert_eq!(out.status.code(), Some(exit::INPUT));
    assert!(String::from_utf8_lossy(&out.stderr).contains("replications"));
}

#[test]
fn simulate_is_deterministic_across_thread_counts() {
    let args = |threads: &str| {
        run(&[
            "simulate",
            "--n",
            "200",
            "--replications",
            "6",
            "--seed",
            "9",
            "--format",
            "json",
            "--threads",
            threads,
        ])
    };
    let a = args("1");
    let b = args("3");
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let report: Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(report["replications"], 6);
    assert!(report["rows"][0]["oracle_se"].as_f64().unwrap() > 0.0);
}

#[test]
fn threads_env_var_is_honoured() {
    let out = bin()
        .args(["simulate", "--n", "100", "--replications", "2"])
        .env("MEDIATE_CALIB_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(exit::INPUT));
}

#[test]
fn output_file_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("check.json");
    let out = run(&["check", "--format", "json", "--output", path.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn config_file_supplies_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_sample(dir.path(), &DiscreteDGP::random(3, false), 400, 3);
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "input = {:?}\nrho = \"el\"\nformat = \"json\"\n[columns]\ntreatment = \"t\"\nmediator = [\"m1\"]\noutcome = \"y\"\ncovariates = \"x1\"\n",
            csv.to_str().unwrap()
        ),
    )
    .unwrap();
    let out = run(&["estimate", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["rho"], "empirical_likelihood");

    let out = run(&["estimate", "--config", cfg.to_str().unwrap(), "--rho", "cue"]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["rho"], "continuous_updating");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "rhoo = \"et\"\n").unwrap();
    let out = run(&["estimate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(exit::INPUT));
}

/// Convex where it must be concave.
struct Broken;

impl ConcaveGenerator for Broken {
    fn name(&self) -> &str {
        "broken"
    }
    fn value(&self, v: f64) -> f64 {
        v + 0.5 * v * v
    }
    fn deriv1(&self, v: f64) -> f64 {
        1.0 + v
    }
    fn deriv2(&self, _v: f64) -> f64 {
        1.0
    }
}

#[test]
fn check_passes_for_builtins_and_flags_broken_generator() {
    let out = run(&["check"]);
    assert_eq!(out.status.code(), Some(exit::OK));
    let report = check_report_for(&[&Broken]);
    assert!(!report.passed);
    assert!(report
        .checks
        .iter()
        .any(|c| !c.passed && c.name.contains("concav")));
}

#[test]
fn check_rejects_unknown_family() {
    assert_eq!(run(&["check", "--rho", "nope"]).status.code(), Some(exit::INPUT));
    assert_eq!(run(&["check", "--rho", "el"]).status.code(), Some(exit::OK));
}
