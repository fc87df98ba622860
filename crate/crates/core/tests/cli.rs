mod common;

use std::path::{Path, PathBuf};
use std::process::Command;

use mjlq::cli::{self, SolveArtifact};
use mjlq::model::{self, CoupledMatrixSet};
use mjlq::{SimResult, StabilityCertificate};
use tempfile::TempDir;

fn run(args: &[&str]) -> cli::CommandOutcome {
    cli::run_from_args(std::iter::once("mjlq").chain(args.iter().copied()))
}

fn data(name: &str) -> String {
    common::data_path(name).to_string_lossy().into_owned()
}

fn tmp(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

fn write(dir: &TempDir, name: &str, text: &str) -> String {
    let p = dir.path().join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const MINUS_IDENTITY: &str = r#"{"n": 1, "m": 1, "L": 1, "generator": [[0]],
  "regimes": [{"A": [[-1]], "B": [[0]], "C": [[0]], "D": [[0]], "Q": [[1]], "S": [[0]], "R": [[0]]}]}"#;

const UNCONTROLLABLE: &str = r#"{"n": 1, "m": 1, "L": 1, "generator": [[0]],
  "regimes": [{"A": [[1]], "B": [[0]], "C": [[0]], "D": [[0]], "Q": [[1]], "S": [[0]], "R": [[1]]}]}"#;

#[test]
fn validate_exit_codes() {
    let dir = TempDir::new().unwrap();
    assert_eq!(run(&["validate", &data("scalar_regimes.json")]).exit_code, cli::EXIT_OK);
    let bad = std::fs::read_to_string(data("scalar_regimes.json")).unwrap().replace("[-0.7, 0.3, 0.4]", "[-0.7, 0.3, 0.45]");
    assert_eq!(run(&["validate", &write(&dir, "bad.json", &bad)]).exit_code, cli::EXIT_INVALID);
    assert_eq!(run(&["validate", &write(&dir, "junk.json", "{")]).exit_code, cli::EXIT_INVALID);
    assert_eq!(run(&["validate", &tmp(&dir, "missing.json")]).exit_code, cli::EXIT_IO);
    assert_eq!(run(&["frobnicate"]).exit_code, cli::EXIT_INVALID);
}

#[test]
fn stability_exit_codes() {
    let dir = TempDir::new().unwrap();
    let out = tmp(&dir, "cert.json");
    let o = run(&["stability", &data("scalar_regimes.json"), "-o", &out]);
    assert_eq!(o.exit_code, cli::EXIT_UNSTABLE);
    let cert: StabilityCertificate = model::load_json(&out).unwrap();
    assert_eq!(cert.sign_values, vec![3.0, 2.0, 5.0]);

    let sigma = tmp(&dir, "sigma.json");
    model::save_artifact(&common::scalar_sigma(), &sigma).unwrap();
    assert_eq!(run(&["stability", &data("scalar_regimes.json"), &sigma, "-o", &out]).exit_code, cli::EXIT_OK);
    let cert: StabilityCertificate = model::load_json(&out).unwrap();
    assert_eq!(cert.sign_values, vec![-1.0, -5.0, -3.0]);

    let stable = write(&dir, "stable.json", MINUS_IDENTITY);
    assert_eq!(run(&["stability", &stable, "-o", &out]).exit_code, cli::EXIT_OK);
}

#[test]
fn solve_then_verify_round_trip() {
    let dir = TempDir::new().unwrap();
    for (name, check) in [("scalar_regimes.json", true), ("discounted_planar.json", false)] {
        let sol = tmp(&dir, &format!("{name}.sol"));
        let o = run(&["solve", &data(name), "-o", &sol]);
        assert_eq!(o.exit_code, cli::EXIT_OK, "{}", o.summary);
        assert_eq!(o.report_path.as_deref(), Some(Path::new(&sol)));
        let v = run(&["verify", &data(name), &sol, "-o", &tmp(&dir, "v.json")]);
        assert_eq!(v.exit_code, cli::EXIT_OK, "{}", v.summary);
        let artifact: SolveArtifact = model::load_json(&sol).unwrap();
        assert!(artifact.solution.residuals.iter().all(|r| *r <= 1e-7));
        if check {
            for i in 0..3 {
                assert!((artifact.solution.p[i][(0, 0)] - common::P_SCALAR[i]).abs() <= 1e-5);
            }
        } else {
            assert_eq!(artifact.discount_r, 0.2);
            assert!((artifact.solution.p[0][(1, 1)] - 0.3082).abs() <= 5e-4);
        }
    }
    // The homotopy path verifies too.
    let sol = tmp(&dir, "hom.json");
    assert_eq!(run(&["solve", &data("scalar_regimes.json"), "--eps-homotopy", "-o", &sol]).exit_code, cli::EXIT_OK);
    assert_eq!(run(&["verify", &data("scalar_regimes.json"), &sol, "-o", &tmp(&dir, "v.json")]).exit_code, cli::EXIT_OK);
}

#[test]
fn solve_failure_writes_nothing() {
    let dir = TempDir::new().unwrap();
    let prob = write(&dir, "unctl.json", UNCONTROLLABLE);
    let out = tmp(&dir, "never.json");
    let o = run(&["solve", &prob, "-o", &out]);
    assert_eq!(o.exit_code, cli::EXIT_NOT_STABILIZABLE);
    assert!(o.report_path.is_none());
    assert!(!Path::new(&out).exists());
    assert_eq!(run(&["stabilize", &prob, "-o", &out]).exit_code, cli::EXIT_NOT_STABILIZABLE);
}

#[test]
fn verify_rejections_and_degenerate_acceptance() {
    let dir = TempDir::new().unwrap();
    let zero = tmp(&dir, "zero.json");
    model::save_artifact(&CoupledMatrixSet::zeros(3, 1), &zero).unwrap();
    assert_eq!(run(&["verify", &data("scalar_regimes.json"), &zero, "-o", &tmp(&dir, "v.json")]).exit_code, cli::EXIT_REJECTED);
    let deg = write(&dir, "deg.json", MINUS_IDENTITY);
    let half = tmp(&dir, "half.json");
    model::save_artifact(&CoupledMatrixSet::from_scalars(&[0.5]), &half).unwrap();
    assert_eq!(run(&["verify", &deg, &half, "-o", &tmp(&dir, "v.json")]).exit_code, cli::EXIT_OK);
}

#[test]
fn synthesize_value_and_simulate() {
    let dir = TempDir::new().unwrap();
    let sol = tmp(&dir, "sol.json");
    assert_eq!(run(&["solve", &data("scalar_regimes.json"), "-o", &sol]).exit_code, cli::EXIT_OK);
    let strat = tmp(&dir, "strat.json");
    assert_eq!(run(&["synthesize", &data("scalar_regimes.json"), "--solution", &sol, "-o", &strat]).exit_code, cli::EXIT_OK);
    let o = run(&["value", &data("scalar_regimes.json"), &sol, "--x", "1", "--i", "0", "-o", &tmp(&dir, "val.json")]);
    assert_eq!(o.exit_code, cli::EXIT_OK);
    assert!(o.summary.contains("7.44607"), "{}", o.summary);

    let sim = tmp(&dir, "sim.json");
    let problem = data("scalar_regimes.json");
    let args = ["--paths", "300", "--horizon", "5", "--dt", "0.01", "-o", &sim];
    let mut full = vec!["simulate", &problem, &strat, "--x0", "1", "--i0", "0"];
    full.extend_from_slice(&args);
    assert_eq!(run(&full).exit_code, cli::EXIT_OK);
    let r: SimResult = model::load_json(&sim).unwrap();
    assert!((r.cost_mean - common::P_SCALAR[0]).abs() < 5.0 * r.cost_stderr + 0.05 * common::P_SCALAR[0]);

    let mut zero = vec!["simulate", &problem, &sol, "--x0", "0"];
    zero.extend_from_slice(&args);
    assert_eq!(run(&zero).exit_code, cli::EXIT_OK);
    let r: SimResult = model::load_json(&sim).unwrap();
    assert_eq!(r.cost_mean, 0.0);
}

#[test]
fn open_loop_simulation_overflows_or_explodes() {
    let dir = TempDir::new().unwrap();
    let zero = write(&dir, "zero.json", r#"{"theta": [[[0], [0]], [[0], [0]], [[0], [0]]], "nu": [[0, 0], [0, 0], [0, 0]]}"#);
    let sim = tmp(&dir, "sim.json");
    let o = run(&["simulate", &data("scalar_regimes.json"), &zero, "--x0", "1", "--paths", "1000", "--horizon", "10", "--dt", "0.01", "-o", &sim]);
    let r: SimResult = model::load_json(&sim).unwrap();
    if o.exit_code != cli::EXIT_OVERFLOW {
        assert_eq!(o.exit_code, cli::EXIT_OK);
        assert!(!mjlq::mcsim::check_decay(&r), "{}", o.summary);
    }
}

fn binary() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_mjlq"))
}

#[test]
fn binary_exit_codes_and_thread_env() {
    let status = Command::new(binary()).args(["validate", &data("scalar_regimes.json")]).status().unwrap();
    assert_eq!(status.code(), Some(0));
    let status = Command::new(binary()).args(["stability", &data("scalar_regimes.json")]).output().unwrap();
    assert_eq!(status.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&status.stdout).contains("\"sign_screen\""));

    let dir = TempDir::new().unwrap();
    let sol = tmp(&dir, "sol.json");
    assert_eq!(Command::new(binary()).args(["solve", &data("scalar_regimes.json"), "-o", &sol]).status().unwrap().code(), Some(0));
    let mut outputs = Vec::new();
    for threads in ["1", "4"] {
        let out = Command::new(binary())
            .env("MJLQ_THREADS", threads)
            .args(["simulate", &data("scalar_regimes.json"), &sol, "--x0", "1", "--paths", "64", "--horizon", "2", "--dt", "0.01"])
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0));
        let mut r: SimResult = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(r.config.workers, Some(threads.parse().unwrap()));
        r.config.workers = None;
        outputs.push(model::to_json_string(&r).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}
