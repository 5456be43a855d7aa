use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mfg_noise_lab_cli::config::{ExperimentConfig, MatrixSpec};
use mfg_noise_lab_cli::presets::{preset, PRESETS};
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mfg-noise-lab"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn text(out: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: [&str; 6] = ["--replications", "16", "--horizon", "2", "--seed", "11"];

fn small_run(preset: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", preset, "--quiet", "--out", out.to_str().unwrap()];
    args.extend(SMALL);
    args.extend(extra);
    run(&args)
}

#[test]
fn riccati_regression_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["run", "riccati-regression", "--quiet", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out));
    let csv = fs::read_to_string(dir.path().join("regression.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "rho,r,p_formula,p_solver,residual");
    assert_eq!(lines.len(), 26);
    for line in &lines[1..] {
        let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        assert!((v[2] - v[3]).abs() <= 1e-8 && v[4] <= 1e-9, "{line}");
    }
    let summary = json(&dir.path().join("summary.json"));
    assert_eq!(summary["passed"], Value::Bool(true));
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = small_run("integrator-consensus-fig2", a.path(), &[]);
    let second = bin()
        .env("MFG_NOISE_LAB_THREADS", "3")
        .args(["run", "--preset", "integrator-consensus-fig2", "--quiet", "--out", b.path().to_str().unwrap()])
        .args(SMALL)
        .output()
        .unwrap();
    assert!(first.status.success() && second.status.success(), "{}{}", text(&first), text(&second));
    for f in ["paths.csv", "metrics.csv", "summary.json", "manifest.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn outputs_have_the_documented_shape() {
    let dir = tempfile::tempdir().unwrap();
    let out = small_run("uniform-agents-fig1", dir.path(), &[]);
    assert!(out.status.success(), "{}", text(&out));
    let paths = fs::read_to_string(dir.path().join("paths.csv")).unwrap();
    let header: Vec<&str> = paths.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 51);
    assert_eq!((header[0], header[50]), ("t", "x49"));
    // 2 / 0.01 steps recorded at every node
    assert_eq!(paths.lines().count(), 202);
    let second = paths.lines().nth(1).unwrap();
    assert!(second.split(',').all(|s| s.contains('e') && s.parse::<f64>().is_ok()));
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next().unwrap(),
        "t,dev_target,dev_target_stderr,dev_average,dev_average_stderr,avg,xbar"
    );
    let summary = json(&dir.path().join("summary.json"));
    assert!(summary["results"]["classes"][0]["residual"].as_f64().unwrap() <= 1e-9);
    assert!(summary["audits"].as_array().unwrap().iter().any(|a| a["name"] == "agreement"));
}

#[test]
fn manifest_records_the_resolved_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = small_run("additive-baseline-fig3", dir.path(), &["--dt", "0.02"]);
    assert!(out.status.success(), "{}", text(&out));
    let manifest = json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["source"]["preset"], "additive-baseline-fig3");
    let sim = &manifest["config"]["simulation"];
    assert_eq!((sim["replications"].as_u64(), sim["horizon"].as_f64(), sim["dt"].as_f64()), (Some(16), Some(2.0), Some(0.02)));
    let cfg: ExperimentConfig = serde_json::from_value(manifest["config"].clone()).unwrap();
    assert_eq!(cfg.baseline.unwrap().sigma, 0.5);

    // the manifest alone reproduces the run
    let cfg_path = dir.path().join("resolved.json");
    fs::write(&cfg_path, serde_json::to_string(&manifest["config"]).unwrap()).unwrap();
    let again = tempfile::tempdir().unwrap();
    let out = run(&["run", "--config", cfg_path.to_str().unwrap(), "--quiet", "--out", again.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out));
    for f in ["paths.csv", "metrics.csv", "summary.json"] {
        assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(again.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn additive_baseline_reports_no_consensus() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["run", "additive-baseline-fig3", "--replications", "50", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out));
    let summary = json(&dir.path().join("summary.json"));
    let gain = summary["results"]["gain"].as_f64().unwrap();
    assert!((gain - 0.48062485).abs() < 1e-7);
    assert!((summary["results"]["stationary_deviation"].as_f64().unwrap() - 0.25 / (2.0 * gain)).abs() < 1e-12);
    assert!(text(&out).contains("PASS no-consensus"));
}

#[test]
fn unknown_preset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["run", "fig4", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out).contains("unknown preset `fig4`"));
    assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
    assert!(PRESETS.iter().all(|p| preset(p).is_some()));
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = serde_json::to_value(preset("integrator-consensus-fig2").unwrap()).unwrap();
    cfg["simulation"]["typo"] = Value::from(1);
    let path = dir.path().join("bad.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let out = run(&["run", "--config", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out).contains("unknown field `typo`"), "{}", text(&out));

    let mut c = preset("integrator-consensus-fig2").unwrap();
    c.classes[0].params.b = MatrixSpec::Rows(vec![vec![1.0], vec![1.0, 2.0]]);
    let msg = c.check().unwrap_err().to_string();
    assert!(msg.contains("classes[0].params.b[1]"), "{msg}");

    let mut c = preset("nash-sweep").unwrap();
    c.simulation.replications = 0;
    assert!(c.check().unwrap_err().to_string().contains("simulation.replications"));
}

#[test]
fn validate_reports_assumptions() {
    let cases = [
        ("uniform-agents.json", Some(0), "PASS A4 detect"),
        ("integrator-consensus.json", Some(0), "yes  consensus"),
        ("indefinite-weight.json", Some(0), "no   consensus"),
        ("negative-weight.json", Some(1), "FAIL convexity"),
        ("zero-state-weight.json", Some(1), "Q = 0 leaves"),
    ];
    for (file, code, needle) in cases {
        let out = run(&["validate", configs().join(file).to_str().unwrap()]);
        assert_eq!(out.status.code(), code, "{file}: {}", text(&out));
        assert!(text(&out).contains(needle), "{file}: {}", text(&out));
    }
    let thresholds = text(&run(&["validate", configs().join("negative-weight.json").to_str().unwrap()]));
    assert!(thresholds.contains("-0.1949385") && thresholds.contains("-0.1923077"));
    let missing = run(&["validate", "/nonexistent/config.json"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(text(&missing).contains("cannot read"));
}

#[test]
fn presets_round_trip_through_json() {
    for name in PRESETS {
        let out = run(&["show", name]);
        assert!(out.status.success());
        let parsed: ExperimentConfig = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(parsed, preset(name).unwrap());
        parsed.check().unwrap();
    }
}

#[test]
fn small_nash_sweep_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = preset("nash-sweep").unwrap();
    cfg.nash.as_mut().unwrap().agent_counts = vec![5, 20];
    cfg.nash.as_mut().unwrap().refine_steps = 2;
    cfg.simulation.replications = 40;
    let path = dir.path().join("nash.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = run(&["run", "--config", path.to_str().unwrap(), "--quiet", "--out", dir.path().join("o").to_str().unwrap()]);
    let summary = json(&dir.path().join("o/summary.json"));
    assert_eq!(out.status.success(), summary["passed"].as_bool().unwrap());
    let csv = fs::read_to_string(dir.path().join("o/nash.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    assert_eq!(summary["results"]["reports"].as_array().unwrap().len(), 6);
}
