//! `mjlq` command-line front end.
//!
//! Reports are JSON (to `-o` or stdout); the one-line summary goes to stderr. Exit codes:
//! 0 ok, 1 I/O, 2 invalid input, 3 unstable, 4 not stabilizable, 5 solver failure,
//! 6 verification rejected, 7 simulation overflow.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::linalg::Vector;
use crate::mcsim::{self, SimulationConfig};
use crate::model::{self, CoupledMatrixSet, FeedbackStrategy, ProblemSpec};
use crate::riccati::{self, CareOptions, CareSolution};
use crate::stability::{self, LinearSystem};
use crate::synthesis::{self, StationaryAdjoint};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_UNSTABLE: i32 = 3;
pub const EXIT_NOT_STABILIZABLE: i32 = 4;
pub const EXIT_SOLVER: i32 = 5;
pub const EXIT_REJECTED: i32 = 6;
pub const EXIT_OVERFLOW: i32 = 7;

#[derive(Debug, Parser)]
#[command(name = "mjlq", version, about = "Stochastic LQ control of Markov regime-switching systems")]
pub struct Cli {
    /// Worker threads for simulation (results do not depend on it).
    #[arg(long, global = true, env = "MJLQ_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Output {
    /// Report path; stdout when omitted.
    #[arg(short = 'o', long = "out")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a problem file.
    Validate { problem: PathBuf },
    /// Certify L2-stability of the open loop, or of the closed loop under a strategy.
    Stability {
        problem: PathBuf,
        /// Strategy or solve report whose gains close the loop.
        strategy: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Synthesize a stabilizing feedback.
    Stabilize {
        problem: PathBuf,
        #[command(flatten)]
        output: Output,
    },
    /// Solve the coupled Riccati equations (discounted problems are transformed first).
    Solve {
        problem: PathBuf,
        /// Use the epsilon homotopy for possibly singular control weights.
        #[arg(long)]
        eps_homotopy: bool,
        /// Starting epsilon of the homotopy.
        #[arg(long, default_value_t = 1.0)]
        eps0: f64,
        /// Target Riccati residual for Newton refinement.
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        /// Longest horizon of the backward sweep.
        #[arg(long, default_value_t = 1024.0)]
        t_max: f64,
        #[command(flatten)]
        output: Output,
    },
    /// Verify a candidate solution against the constrained Riccati equations.
    Verify {
        problem: PathBuf,
        solution: PathBuf,
        #[command(flatten)]
        output: Output,
    },
    /// Build the closed-loop optimal strategy (with offsets for inhomogeneous problems).
    Synthesize {
        problem: PathBuf,
        /// Existing solve report; the problem is solved when omitted.
        #[arg(long)]
        solution: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Evaluate the value function at (x, i).
    Value {
        problem: PathBuf,
        solution: PathBuf,
        /// Initial state, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x: Vec<f64>,
        /// Initial regime (0-based).
        #[arg(long, default_value_t = 0)]
        i: usize,
        #[command(flatten)]
        output: Output,
    },
    /// Monte Carlo simulation of the closed loop.
    Simulate {
        problem: PathBuf,
        /// Strategy or solve report.
        strategy: PathBuf,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x0: Vec<f64>,
        /// Initial regime (0-based).
        #[arg(long, default_value_t = 0)]
        i0: usize,
        #[arg(long, default_value_t = 10_000)]
        paths: usize,
        #[arg(long, default_value_t = 20.0)]
        horizon: f64,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long, default_value_t = 0x5eed)]
        seed: u64,
        #[command(flatten)]
        output: Output,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandOutcome {
    pub exit_code: i32,
    pub report_path: Option<PathBuf>,
    pub summary: String,
}

/// What `solve` writes: the Riccati report and the strategy for the original problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveArtifact {
    pub solution: CareSolution,
    pub strategy: FeedbackStrategy,
    pub discount_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SynthesisArtifact {
    strategy: FeedbackStrategy,
    adjoint: Option<StationaryAdjoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ValueArtifact {
    report: synthesis::ValueReport,
    #[serde(with = "crate::model::serde_mat::vector")]
    x: Vector,
    i: usize,
    value: f64,
}

pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Io { .. } => EXIT_IO,
        Error::Parse { .. }
        | Error::Validation(_)
        | Error::Dimension(_)
        | Error::UnsupportedInhomogeneous(_)
        | Error::Precondition(_) => EXIT_INVALID,
        Error::NotStabilizable(_) => EXIT_NOT_STABILIZABLE,
        Error::VerificationRejected(_) => EXIT_REJECTED,
        Error::Overflow { .. } => EXIT_OVERFLOW,
        _ => EXIT_SOLVER,
    }
}

fn failure(err: Error) -> CommandOutcome {
    CommandOutcome { exit_code: exit_code_for(&err), report_path: None, summary: format!("error: {err}") }
}

fn emit<T: Serialize>(object: &T, output: &Output) -> Result<Option<PathBuf>, Error> {
    match &output.out {
        Some(path) => {
            model::save_artifact(object, path)?;
            Ok(Some(path.clone()))
        }
        None => {
            println!("{}", model::to_json_string(object)?);
            Ok(None)
        }
    }
}

fn finish<T: Serialize>(object: &T, output: &Output, exit_code: i32, summary: String) -> CommandOutcome {
    match emit(object, output) {
        Ok(report_path) => CommandOutcome { exit_code, report_path, summary },
        Err(e) => failure(e),
    }
}

/// Loads gains from a bare strategy file or from a solve report.
fn load_strategy(path: &Path) -> Result<FeedbackStrategy, Error> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })?;
    if let Ok(s) = serde_json::from_str::<FeedbackStrategy>(&text) {
        return Ok(s);
    }
    if let Ok(a) = serde_json::from_str::<SolveArtifact>(&text) {
        return Ok(a.strategy);
    }
    serde_json::from_str::<SynthesisArtifact>(&text)
        .map(|a| a.strategy)
        .map_err(|e| Error::Parse { path: path.into(), message: format!("not a strategy or solve report: {e}") })
}

/// Loads `P` from a solve report, a bare Riccati solution, or a bare matrix set.
fn load_solution(path: &Path) -> Result<(CoupledMatrixSet, Option<CareSolution>), Error> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })?;
    if let Ok(a) = serde_json::from_str::<SolveArtifact>(&text) {
        return Ok((a.solution.p.clone(), Some(a.solution)));
    }
    if let Ok(c) = serde_json::from_str::<CareSolution>(&text) {
        return Ok((c.p.clone(), Some(c)));
    }
    serde_json::from_str::<CoupledMatrixSet>(&text)
        .map(|p| (p, None))
        .map_err(|e| Error::Parse { path: path.into(), message: format!("not a solution file: {e}") })
}

/// A solve report for `problem` built around a given `P` (gains recomputed).
fn care_from_p(problem: &ProblemSpec, p: CoupledMatrixSet) -> Result<CareSolution, Error> {
    let theta = riccati::optimal_gains(problem, &p)?;
    let stable = stability::check_l2_stable(&LinearSystem::with_gains(problem, &theta))?.stable;
    Ok(CareSolution {
        residuals: riccati::residual_norms(problem, &p),
        n_margins: riccati::n_margins(problem, &p),
        p,
        theta: FeedbackStrategy::from_gains(theta),
        sigma: FeedbackStrategy::zeros(problem.regimes_count(), problem.m, problem.n),
        stabilizing: stable,
        trace: Default::default(),
        options: CareOptions::default(),
        wall_time_s: 0.0,
        verification: None,
        warnings: Vec::new(),
    })
}

fn fmt_list(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.4e}")).collect::<Vec<_>>().join(", ")
}

pub fn cmd_validate(problem: &Path) -> CommandOutcome {
    match model::load_problem(problem) {
        Ok(p) => CommandOutcome {
            exit_code: EXIT_OK,
            report_path: None,
            summary: format!(
                "valid: n = {}, m = {}, L = {}, {}, r = {}",
                p.n,
                p.m,
                p.regimes_count(),
                if p.is_homogeneous() { "homogeneous" } else { "inhomogeneous" },
                p.discount_r
            ),
        },
        Err(e) => failure(e),
    }
}

pub fn cmd_stability(problem: &Path, strategy: Option<&Path>, output: &Output) -> CommandOutcome {
    let run = || -> Result<_, Error> {
        let p = model::load_problem(problem)?;
        let sys = match strategy {
            Some(s) => LinearSystem::closed_loop(&p, &load_strategy(s)?)?,
            None => LinearSystem::open_loop(&p),
        };
        stability::check_l2_stable(&sys)
    };
    match run() {
        Ok(cert) => {
            let code = if cert.stable { EXIT_OK } else { EXIT_UNSTABLE };
            let summary = format!(
                "{} ({:?}); spectral abscissa {:.6e}; sign values [{}]",
                if cert.stable { "L2-stable" } else { "not L2-stable" },
                cert.method,
                cert.spectral_abscissa.unwrap_or(f64::NAN),
                fmt_list(&cert.sign_values)
            );
            finish(&cert, output, code, summary)
        }
        Err(e) => failure(e),
    }
}

pub fn cmd_stabilize(problem: &Path, output: &Output) -> CommandOutcome {
    let run = || -> Result<_, Error> {
        let p = model::load_problem(problem)?;
        riccati::synthesize_stabilizer(&p, &CareOptions::default())
    };
    match run() {
        Ok(s) => finish(&s, output, EXIT_OK, "stabilizer synthesized and certified".into()),
        Err(e) => failure(e),
    }
}

pub struct SolveFlags {
    pub eps_homotopy: bool,
    pub eps0: f64,
    pub tol: f64,
    pub t_max: f64,
}

pub fn cmd_solve(problem: &Path, flags: &SolveFlags, output: &Output) -> CommandOutcome {
    let run = || -> Result<_, Error> {
        let p = model::load_problem(problem)?;
        let r = p.discount_r;
        let reduced = synthesis::discount_transform(&p)?;
        let options = CareOptions { residual_tol: flags.tol, t_max: flags.t_max, ..CareOptions::default() };
        let solution = if flags.eps_homotopy {
            riccati::solve_care_eps_homotopy(&reduced, flags.eps0, &options)?
        } else {
            riccati::solve_care(&reduced, &options)?
        };
        let strategy = if flags.eps_homotopy {
            solution.theta.clone()
        } else {
            synthesis::build_closed_loop(&reduced, &solution)?
        };
        let strategy = synthesis::undiscount_strategy(&strategy, r)?;
        Ok(SolveArtifact { solution, strategy, discount_r: r })
    };
    match run() {
        Ok(a) => {
            let summary = format!(
                "solved in {:.3}s; residuals [{}]",
                a.solution.wall_time_s,
                fmt_list(&a.solution.residuals)
            );
            finish(&a, output, EXIT_OK, summary)
        }
        Err(e) => failure(e),
    }
}

pub fn cmd_verify(problem: &Path, solution: &Path, output: &Output) -> CommandOutcome {
    let run = || -> Result<_, Error> {
        let p = synthesis::discount_transform(&model::load_problem(problem)?)?;
        let (pm, _) = load_solution(solution)?;
        riccati::verify_care(&p, &pm, None)
    };
    match run() {
        Ok(rep) => {
            let code = if rep.accepted { EXIT_OK } else { EXIT_REJECTED };
            let res: Vec<f64> = rep.regimes.iter().map(|r| r.riccati_residual).collect();
            let summary = format!(
                "{}; |E_i(P)| = [{}]{}",
                if rep.accepted { "accepted" } else { "rejected" },
                fmt_list(&res),
                rep.notes.iter().map(|n| format!("; {n}")).collect::<String>()
            );
            finish(&rep, output, code, summary)
        }
        Err(e) => failure(e),
    }
}

pub fn cmd_synthesize(problem: &Path, solution: Option<&Path>, output: &Output) -> CommandOutcome {
    let run = || -> Result<_, Error> {
        let p = model::load_problem(problem)?;
        let reduced = synthesis::discount_transform(&p)?;
        let care = match solution {
            Some(s) => match load_solution(s)? {
                (_, Some(c)) => c,
                (pm, None) => care_from_p(&reduced, pm)?,
            },
            None => riccati::solve_care(&reduced, &CareOptions::default())?,
        };
        let strategy = synthesis::undiscount_strategy(&synthesis::build_closed_loop(&reduced, &care)?, p.discount_r)?;
        let adjoint = if reduced.is_homogeneous() {
            None
        } else {
            Some(synthesis::solve_stationary_adjoint(&reduced, &care)?)
        };
        Ok(SynthesisArtifact { strategy, adjoint })
    };
    match run() {
        Ok(a) => finish(&a, output, EXIT_OK, "closed-loop strategy built".into()),
        Err(e) => failure(e),
    }
}

pub fn cmd_value(problem: &Path, solution: &Path, x: &[f64], i: usize, output: &Output) -> CommandOutcome {
    let run = || -> Result<_, Error> {
        let p = synthesis::discount_transform(&model::load_problem(problem)?)?;
        if x.len() != p.n {
            return Err(Error::Validation(format!("x has length {}, expected {}", x.len(), p.n)));
        }
        if i >= p.regimes_count() {
            return Err(Error::Validation(format!("regime {i} out of range")));
        }
        let care = match load_solution(solution)? {
            (_, Some(c)) => c,
            (pm, None) => care_from_p(&p, pm)?,
        };
        let report = synthesis::value_function(&p, &care, None)?;
        let x = Vector::from_column_slice(x);
        let value = report.evaluate(&x, i);
        Ok(ValueArtifact { report, x, i, value })
    };
    match run() {
        Ok(a) => {
            let summary = format!("V(x, {}) = {:.10}", a.i, a.value);
            finish(&a, output, EXIT_OK, summary)
        }
        Err(e) => failure(e),
    }
}

pub struct SimulateFlags {
    pub x0: Vec<f64>,
    pub i0: usize,
    pub paths: usize,
    pub horizon: f64,
    pub dt: f64,
    pub seed: u64,
    pub threads: Option<usize>,
}

pub fn cmd_simulate(problem: &Path, strategy: &Path, flags: &SimulateFlags, output: &Output) -> CommandOutcome {
    let run = || -> Result<_, Error> {
        let p = model::load_problem(problem)?;
        let s = load_strategy(strategy)?;
        let x0 = if flags.x0.is_empty() { vec![1.0; p.n] } else { flags.x0.clone() };
        let mut config = SimulationConfig::new(Vector::from_vec(x0), flags.i0)
            .with_paths(flags.paths)
            .with_horizon(flags.horizon)
            .with_dt(flags.dt)
            .with_seed(flags.seed)
            .with_discount(p.discount_r);
        config.workers = flags.threads;
        mcsim::simulate_paths(&p, &s, &config)
    };
    match run() {
        Ok(res) => {
            let summary = format!(
                "cost {:.6} +/- {:.2e} ({} paths), decay {}",
                res.cost_mean,
                res.cost_stderr,
                res.n_paths_used,
                if mcsim::check_decay(&res) { "yes" } else { "no" }
            );
            finish(&res, output, EXIT_OK, summary)
        }
        Err(Error::Overflow { fraction, result }) => {
            let summary = format!("simulation overflow on {:.2}% of paths", fraction * 100.0);
            finish(result.as_ref(), output, EXIT_OVERFLOW, summary)
        }
        Err(e) => failure(e),
    }
}

/// Dispatches a parsed command line.
pub fn run(cli: Cli) -> CommandOutcome {
    match cli.command {
        Command::Validate { problem } => cmd_validate(&problem),
        Command::Stability { problem, strategy, output } => cmd_stability(&problem, strategy.as_deref(), &output),
        Command::Stabilize { problem, output } => cmd_stabilize(&problem, &output),
        Command::Solve { problem, eps_homotopy, eps0, tol, t_max, output } => {
            cmd_solve(&problem, &SolveFlags { eps_homotopy, eps0, tol, t_max }, &output)
        }
        Command::Verify { problem, solution, output } => cmd_verify(&problem, &solution, &output),
        Command::Synthesize { problem, solution, output } => cmd_synthesize(&problem, solution.as_deref(), &output),
        Command::Value { problem, solution, x, i, output } => cmd_value(&problem, &solution, &x, i, &output),
        Command::Simulate { problem, strategy, x0, i0, paths, horizon, dt, seed, output } => cmd_simulate(
            &problem,
            &strategy,
            &SimulateFlags { x0, i0, paths, horizon, dt, seed, threads: cli.threads },
            &output,
        ),
    }
}

/// Parses arguments (including the program name) and runs the command. Usage errors map
/// to exit code 2.
pub fn run_from_args<I, T>(args: I) -> CommandOutcome
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            CommandOutcome { exit_code: code, report_path: None, summary: e.to_string() }
        }
    }
}
