//! End-to-end checks of the binary: argument handling, exit codes,
//! determinism of output bytes, config file semantics.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_inforesp"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout is utf-8")
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("stderr is utf-8")
}

#[test]
fn analytic_emits_known_values_and_is_deterministic() {
    let args = ["analytic", "--model", "ou2", "--tau", "0.5:10:0.5"];
    let a = run(&args);
    let b = run(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout, "repeated runs must match byte for byte");
    let text = stdout(&a);
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(
        lines.next().unwrap(),
        "tau,gamma,transfer_entropy,gamma_ensemble,mutual_info_yy,mutual_info_xy_y"
    );
    assert_eq!(lines.clone().count(), 20);
    // The tau = 3 row carries the closed-form values of the builtin pair.
    let row3 = lines.find(|l| l.starts_with("3,")).expect("tau = 3 row");
    let fields: Vec<f64> = row3.split(',').map(|v| v.parse().unwrap()).collect();
    assert!((fields[1] - 1.314_201_697_090_427_6).abs() < 1e-12, "{row3}");
    assert!((fields[2] - 0.419_532_394_398_834_4).abs() < 1e-12, "{row3}");
    assert!((fields[3] - 0.073_733_057_050_060_52).abs() < 1e-12, "{row3}");
}

#[test]
fn analytic_reports_zero_for_negative_lags() {
    let out = run(&["analytic", "--model", "ou2", "--tau", "-2,3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let neg = text.lines().find(|l| l.starts_with("-2,")).unwrap();
    let fields: Vec<f64> = neg.split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(fields[1], 0.0, "response must vanish before the perturbation");
    assert_eq!(fields[2], 0.0);
    assert_eq!(fields[3], 0.0);
}

#[test]
fn analytic_rejects_nonlinear_model() {
    let out = run(&["analytic", "--model", "quad", "--tau", "3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("linear"), "{}", stderr(&out));
}

#[test]
fn unknown_model_is_a_usage_error() {
    let out = run(&["analytic", "--model", "nope", "--tau", "3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown model"), "{}", stderr(&out));
}

#[test]
fn missing_model_is_a_usage_error() {
    let out = run(&["analytic", "--tau", "3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn inline_matrix_model_matches_builtin() {
    let builtin = run(&["analytic", "--model", "ou2", "--tau", "3"]);
    let inline = run(&[
        "analytic",
        "--a",
        "0.1,0;-0.5,0.2",
        "--q",
        "0.1,0;0,0",
        "--tau",
        "3",
    ]);
    assert!(inline.status.success(), "{}", stderr(&inline));
    let tail = |o: &Output| {
        stdout(o)
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(String::from)
            .collect::<Vec<_>>()
    };
    assert_eq!(tail(&builtin), tail(&inline));
}

#[test]
fn measure_rejects_invalid_epsilon_ladder() {
    let out = run(&[
        "measure", "--model", "ou2", "--tau", "3", "--epsilon", "0",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn measure_same_seed_is_byte_identical() {
    let args = [
        "measure",
        "--model",
        "ou2",
        "--tau",
        "1",
        "--seed",
        "7",
        "--json",
        "--reduced",
        "--n-conditions",
        "8",
        "--n-conditional",
        "500",
        "--n-stationary",
        "4000",
        "--chains",
        "8",
    ];
    let a = run(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    let b = run(&args);
    assert_eq!(a.stdout, b.stdout);
    let text = stdout(&a);
    assert!(text.contains("\"stderr\""), "JSON must carry stderr fields");
    assert!(text.contains("\"ladder\""), "JSON must echo ladder diagnostics");
}

#[test]
fn validate_sections_and_exit_codes() {
    let ok = run(&["validate", "--check", "identities", "--json"]);
    assert!(ok.status.success(), "{}", stderr(&ok));
    let again = run(&["validate", "--check", "identities", "--json"]);
    assert_eq!(ok.stdout, again.stdout, "same seed must give identical bytes");

    let bad = run(&["validate", "--check", "nosuchsection"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn validate_env_seed_applies() {
    let out = bin()
        .args(["validate", "--check", "identities", "--json"])
        .env("INFORESP_SEED", "99")
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("\"seed\": \"99\""));
}

#[test]
fn grid_density_has_csv_contract() {
    let out = run(&["grid", "--model", "ou2", "--quantity", "density"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.starts_with("# quantity = stationary_density"));
    let header = text.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header, "x0,y0,value");
}

#[test]
fn grid_requires_tau_for_lag_fields() {
    let out = run(&["grid", "--model", "ou2", "--quantity", "local-te"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn figure_writes_files_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "figure",
        "fig_a1",
        "--outdir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let base = dir.path().join("fig_a1");
    assert!(base.join("response_vs_lag.csv").exists());
    let report = std::fs::read_to_string(base.join("report.json")).unwrap();
    assert!(report.contains("\"status\": \"pass\""));
    assert!(stdout(&out).contains("fig_a1: 7 passed, 0 failed"));
}

#[test]
fn config_file_supplies_values_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "[analytic]\nmodel = ou2\ntau = 3\n").unwrap();
    let cfg = cfg.to_str().unwrap();

    let from_file = run(&["analytic", "--config", cfg]);
    assert!(from_file.status.success(), "{}", stderr(&from_file));
    let from_flags = run(&["analytic", "--model", "ou2", "--tau", "3"]);
    let body = |o: &Output| {
        stdout(o)
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(String::from)
            .collect::<Vec<_>>()
    };
    assert_eq!(body(&from_file), body(&from_flags));

    // A flag beats the file: tau = 1 from the command line wins.
    let overridden = run(&["analytic", "--config", cfg, "--tau", "1"]);
    assert!(overridden.status.success());
    assert!(stdout(&overridden).lines().any(|l| l.starts_with("1,")));
    assert!(!stdout(&overridden).lines().any(|l| l.starts_with("3,")));
}

#[test]
fn shipped_analytic_config_runs() {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/analytic.cfg");
    let out = run(&["analytic", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = stdout(&out)
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("tau,"))
        .count();
    assert_eq!(rows, 20);
}

#[test]
fn config_file_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "model = ou2\ntau = 3\nbogus = 1\n").unwrap();
    let out = run(&["analytic", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("bogus"), "{}", stderr(&out));
}

#[test]
fn threads_flag_is_validated() {
    let out = run(&["validate", "--check", "identities", "--threads", "0"]);
    assert_eq!(out.status.code(), Some(2));
    let ok = run(&["validate", "--check", "identities", "--threads", "1"]);
    assert!(ok.status.success(), "{}", stderr(&ok));
}

#[test]
fn brownian_report_has_three_checks() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "brownian",
        "--m",
        "1",
        "--lambda",
        "1",
        "--temp",
        "1",
        "--f",
        "0.5",
        "--n",
        "60000",
        "--outdir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report =
        std::fs::read_to_string(dir.path().join("brownian").join("report.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(parsed["checks"].as_array().unwrap().len(), 3);
    assert!(dir.path().join("brownian").join("work_stats.csv").exists());
}

#[test]
fn zero_epsilon_and_degenerate_lag_split_exit_codes() {
    // tau = 0 makes the target coincide with the conditioning variable:
    // a numerical/degeneracy failure, not a usage error.
    let out = run(&["analytic", "--model", "ou2", "--tau", "0"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}
