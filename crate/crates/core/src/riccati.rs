//! Coupled algebraic Riccati equations of the regime-switching LQ problem.
//!
//! With the per-regime maps
//!
//! ```text
//! M(P,i) = P(i)A(i) + A(i)^T P(i) + C(i)^T P(i) C(i) + Q(i) + sum_j pi_ij P(j)
//! L(P,i) = P(i)B(i) + C(i)^T P(i) D(i) + S(i)^T
//! N(P,i) = D(i)^T P(i) D(i) + R(i)
//! ```
//!
//! the solver looks for `P` with `M - L N^{-1} L^T = 0`, `N > 0` and a stabilizing
//! feedback `Theta = -N^{-1} L^T`. Solutions are obtained as the long-horizon limit of the
//! backward differential equations started from zero, on a problem pre-shifted by a
//! certified stabilizer, then polished by Kleinman-Newton steps.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::model::{CoupledMatrixSet, FeedbackStrategy, ProblemSpec, RegimeData};
use crate::stability::{self, LinearSystem};

/// Relative eigenvalue cutoff used for the pseudoinverse of `N`.
pub const PINV_RANK_TOL: f64 = 1e-9;

pub fn m_of(problem: &ProblemSpec, p: &CoupledMatrixSet, i: usize) -> Mat {
    let reg = &problem.regimes[i];
    let pi = &p[i];
    let mut out = pi * &reg.a + reg.a.transpose() * pi + reg.c.transpose() * pi * &reg.c + &reg.q;
    for j in 0..problem.regimes_count() {
        let rate = problem.generator.rate(i, j);
        if rate != 0.0 {
            out += &p[j] * rate;
        }
    }
    linalg::symmetrize(&out)
}

pub fn l_of(problem: &ProblemSpec, p: &CoupledMatrixSet, i: usize) -> Mat {
    let reg = &problem.regimes[i];
    &p[i] * &reg.b + reg.c.transpose() * &p[i] * &reg.d + reg.s.transpose()
}

pub fn n_of(problem: &ProblemSpec, p: &CoupledMatrixSet, i: usize) -> Mat {
    let reg = &problem.regimes[i];
    linalg::symmetrize(&(reg.d.transpose() * &p[i] * &reg.d + &reg.r))
}

/// `E_i(P) = M - L N^{-1} L^T`, or `Err` when `N(P,i)` is singular.
pub fn residual_matrix(problem: &ProblemSpec, p: &CoupledMatrixSet, i: usize) -> Option<Mat> {
    let l = l_of(problem, p, i);
    let k = linalg::solve_mat(&n_of(problem, p, i), &l.transpose())?;
    Some(linalg::symmetrize(&(m_of(problem, p, i) - &l * k)))
}

/// Frobenius norms of `E_i(P)`; infinite where `N` is singular.
pub fn residual_norms(problem: &ProblemSpec, p: &CoupledMatrixSet) -> Vec<f64> {
    (0..problem.regimes_count())
        .map(|i| residual_matrix(problem, p, i).map_or(f64::INFINITY, |e| e.norm()))
        .collect()
}

pub fn n_margins(problem: &ProblemSpec, p: &CoupledMatrixSet) -> Vec<f64> {
    (0..problem.regimes_count()).map(|i| linalg::min_eigenvalue(&n_of(problem, p, i))).collect()
}

/// `Theta(i) = -N(P,i)^{-1} L(P,i)^T`.
pub fn optimal_gains(problem: &ProblemSpec, p: &CoupledMatrixSet) -> Result<Vec<Mat>> {
    (0..problem.regimes_count())
        .map(|i| {
            let n = n_of(problem, p, i);
            linalg::solve_mat(&n, &l_of(problem, p, i).transpose())
                .map(|k| -k)
                .ok_or(Error::NBreakdown { regime: i, time: 0.0, min_eig: linalg::min_eigenvalue(&n) })
        })
        .collect()
}

/// Step control for the backward Riccati sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdreOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_step: f64,
    /// Minimum admissible eigenvalue of `N` along the sweep.
    pub n_floor: f64,
    /// `|P|_F` beyond which the sweep is declared to escape.
    pub blowup_norm: f64,
}

impl Default for CdreOptions {
    fn default() -> Self {
        Self { rtol: 1e-8, atol: 1e-10, max_step: 0.5, n_floor: 1e-10, blowup_norm: 1e12 }
    }
}

/// Step size times stiffness bound kept below this (DP5 real stability interval ~3.3).
const STABILITY_LIMIT: f64 = 2.5;

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Backward sweep of the coupled differential Riccati equations in reversed time
/// `s = T - t`: `dP/ds = M(P) - L(P) N(P)^{-1} L(P)^T`, `P(s=0) = G`.
///
/// The equation is autonomous, so the state after `s` units equals `P(0; s)` and the
/// sweep can be extended to longer horizons without restarting.
pub struct CdreSweep<'a> {
    problem: &'a ProblemSpec,
    options: CdreOptions,
    state: CoupledMatrixSet,
    elapsed: f64,
    step: f64,
    fsal: Option<Vec<Mat>>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

impl<'a> CdreSweep<'a> {
    pub fn new(problem: &'a ProblemSpec, terminal: CoupledMatrixSet, options: CdreOptions) -> Self {
        Self {
            problem,
            options,
            state: terminal,
            elapsed: 0.0,
            step: 1e-3,
            fsal: None,
            accepted_steps: 0,
            rejected_steps: 0,
        }
    }

    pub fn state(&self) -> &CoupledMatrixSet {
        &self.state
    }

    pub fn elapsed(&self) -> f64 {
        self.elapsed
    }

    fn rhs(&self, p: &CoupledMatrixSet, s: f64) -> Result<Vec<Mat>> {
        (0..self.problem.regimes_count())
            .map(|i| {
                let n = n_of(self.problem, p, i);
                let min_eig = linalg::min_eigenvalue(&n);
                if !(min_eig >= self.options.n_floor) {
                    return Err(Error::NBreakdown { regime: i, time: s, min_eig });
                }
                let l = l_of(self.problem, p, i);
                let k = linalg::solve_mat(&n, &l.transpose())
                    .ok_or(Error::NBreakdown { regime: i, time: s, min_eig })?;
                Ok(m_of(self.problem, p, i) - &l * k)
            })
            .collect()
    }

    /// Upper bound on the spectral radius of the linearized flow at `p` (the closed-loop
    /// Lyapunov operator), used to keep explicit steps inside the stability region.
    fn stiffness(&self, p: &CoupledMatrixSet) -> f64 {
        let g = &self.problem.generator;
        (0..self.problem.regimes_count())
            .map(|i| {
                let reg = &self.problem.regimes[i];
                let coupling = 2.0 * g.exit_rate(i);
                let n = n_of(self.problem, p, i);
                match linalg::solve_mat(&n, &l_of(self.problem, p, i).transpose()) {
                    Some(k) => {
                        2.0 * (&reg.a - &reg.b * &k).norm() + (&reg.c - &reg.d * &k).norm_squared() + coupling
                    }
                    None => 2.0 * reg.a.norm() + reg.c.norm_squared() + coupling,
                }
            })
            .fold(0.0, f64::max)
    }

    fn combine(base: &CoupledMatrixSet, h: f64, coeffs: &[f64], stages: &[Vec<Mat>]) -> CoupledMatrixSet {
        let entries = (0..base.len())
            .map(|i| {
                let mut m = base[i].clone();
                for (c, k) in coeffs.iter().zip(stages) {
                    if *c != 0.0 {
                        m += &k[i] * (h * c);
                    }
                }
                m
            })
            .collect();
        CoupledMatrixSet::new(entries)
    }

    /// Advances the sweep until `elapsed == horizon`.
    pub fn advance_to(&mut self, horizon: f64) -> Result<()> {
        let opts = self.options.clone();
        while self.elapsed < horizon {
            let cap = STABILITY_LIMIT / self.stiffness(&self.state).max(1e-300);
            let h = self.step.min(opts.max_step).min(cap).min(horizon - self.elapsed);
            if h < 1e-14 * (1.0 + self.elapsed) {
                return Err(Error::Blowup { time: self.elapsed, norm: self.state.max_norm() });
            }
            let k1 = match self.fsal.take() {
                Some(k) => k,
                None => self.rhs(&self.state, self.elapsed)?,
            };
            let mut stages: Vec<Vec<Mat>> = vec![k1];
            for s in 1..7 {
                let y = Self::combine(&self.state, h, &A[s][..s], &stages);
                stages.push(self.rhs(&y, self.elapsed + C[s] * h)?);
            }
            let y5 = Self::combine(&self.state, h, &B5, &stages);
            let err_coeffs: Vec<f64> = B5.iter().zip(&B4).map(|(a, b)| a - b).collect();
            let err = Self::combine(&CoupledMatrixSet::zeros(self.state.len(), self.state.dim()), h, &err_coeffs, &stages);
            let err_norm = frob(&err);
            let scale = opts.atol + opts.rtol * frob(&self.state).max(frob(&y5));
            let ratio = err_norm / scale;
            if !ratio.is_finite() {
                return Err(Error::Blowup { time: self.elapsed, norm: frob(&y5) });
            }
            let factor = if ratio == 0.0 { 5.0 } else { (0.9 * ratio.powf(-0.2)).clamp(0.2, 5.0) };
            if ratio <= 1.0 {
                self.elapsed = if horizon - (self.elapsed + h) <= 1e-14 * horizon { horizon } else { self.elapsed + h };
                self.state = y5;
                self.fsal = Some(self.rhs(&self.state, self.elapsed)?);
                self.accepted_steps += 1;
                self.step = h * factor;
                let norm = frob(&self.state);
                if !(norm <= opts.blowup_norm) {
                    return Err(Error::Blowup { time: self.elapsed, norm });
                }
            } else {
                self.fsal = Some(stages.swap_remove(0));
                self.rejected_steps += 1;
                self.step = h * factor.min(1.0);
            }
        }
        Ok(())
    }
}

fn frob(p: &CoupledMatrixSet) -> f64 {
    p.entries().iter().map(|m| m.norm_squared()).sum::<f64>().sqrt()
}

/// `P_i(0; T)` for the coupled differential Riccati equations with terminal value `G`.
pub fn integrate_cdre(
    problem: &ProblemSpec,
    terminal: &CoupledMatrixSet,
    horizon: f64,
    options: &CdreOptions,
) -> Result<CoupledMatrixSet> {
    check_set(problem, terminal)?;
    let mut sweep = CdreSweep::new(problem, terminal.clone(), options.clone());
    sweep.advance_to(horizon)?;
    Ok(sweep.state)
}

fn check_set(problem: &ProblemSpec, set: &CoupledMatrixSet) -> Result<()> {
    if set.len() != problem.regimes_count() || set.dim() != problem.n {
        return Err(Error::Dimension(format!(
            "matrix set has {} entries of size {}, expected {} of size {}",
            set.len(),
            set.dim(),
            problem.regimes_count(),
            problem.n
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdreCheckpoint {
    pub horizon: f64,
    /// `max_i |P_i(0;T) - P_i(0;T/2)|_F`.
    pub change: f64,
    pub max_residual: f64,
    pub min_n_margin: f64,
    pub steps: usize,
}

/// Horizon doubling `T = 1, 2, 4, ...` from `G = 0` until the checkpoint change drops
/// below `tol`. Returns the converged `P` and the checkpoint log.
fn sweep_to_convergence(
    problem: &ProblemSpec,
    options: &CdreOptions,
    tol: f64,
    t_max: f64,
) -> Result<std::result::Result<(CoupledMatrixSet, Vec<CdreCheckpoint>), Vec<CdreCheckpoint>>> {
    let mut sweep = CdreSweep::new(
        problem,
        CoupledMatrixSet::zeros(problem.regimes_count(), problem.n),
        options.clone(),
    );
    let mut log = Vec::new();
    let mut previous = sweep.state.clone();
    let mut horizon = 1.0;
    while horizon <= t_max {
        sweep.advance_to(horizon)?;
        let change = sweep.state.max_distance(&previous);
        let residuals = residual_norms(problem, &sweep.state);
        log.push(CdreCheckpoint {
            horizon,
            change,
            max_residual: residuals.iter().copied().fold(0.0, f64::max),
            min_n_margin: n_margins(problem, &sweep.state).into_iter().fold(f64::INFINITY, f64::min),
            steps: sweep.accepted_steps,
        });
        if change <= tol {
            return Ok(Ok((sweep.state, log)));
        }
        previous = sweep.state.clone();
        horizon *= 2.0;
    }
    Ok(Err(log))
}

/// Problem with the feedback `u = Sigma x + v` substituted (cost and dynamics in `v`).
pub fn shift_problem(problem: &ProblemSpec, sigma: &FeedbackStrategy) -> Result<ProblemSpec> {
    sigma.check_dims(problem.regimes_count(), problem.m, problem.n)?;
    let regimes = problem
        .regimes
        .iter()
        .zip(&sigma.theta)
        .map(|(reg, s)| {
            let st = s.transpose();
            let q = &reg.q + reg.s.transpose() * s + &st * &reg.s + &st * &reg.r * s;
            let state_cost = if reg.state_cost.is_some() || reg.control_cost.is_some() {
                Some(reg.q_vec() + &st * reg.rho_vec())
            } else {
                None
            };
            RegimeData {
                a: &reg.a + &reg.b * s,
                b: reg.b.clone(),
                c: &reg.c + &reg.d * s,
                d: reg.d.clone(),
                q: linalg::symmetrize(&q),
                s: &reg.s + &reg.r * s,
                r: reg.r.clone(),
                drift_offset: reg.drift_offset.clone(),
                diffusion_offset: reg.diffusion_offset.clone(),
                state_cost,
                control_cost: reg.control_cost.clone(),
            }
        })
        .collect();
    ProblemSpec::new(problem.n, problem.m, problem.generator.clone(), regimes, problem.discount_r)
}

/// The auxiliary problem with `Q = I`, `R = I`, `S = 0` on the original dynamics.
fn normalized_problem(problem: &ProblemSpec) -> Result<ProblemSpec> {
    let (n, m) = (problem.n, problem.m);
    let regimes = problem
        .regimes
        .iter()
        .map(|reg| {
            RegimeData::new(
                reg.a.clone(),
                reg.b.clone(),
                reg.c.clone(),
                reg.d.clone(),
                Mat::identity(n, n),
                Mat::zeros(m, n),
                Mat::identity(m, m),
            )
        })
        .collect();
    ProblemSpec::new(n, m, problem.generator.clone(), regimes, 0.0)
}

/// Options shared by the algebraic solvers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CareOptions {
    pub cdre: CdreOptions,
    /// Per-regime change between doubling checkpoints that counts as converged.
    pub cdre_tol: f64,
    /// Longest horizon tried before giving up.
    pub t_max: f64,
    /// Target max residual for Newton refinement.
    pub residual_tol: f64,
    pub max_newton: usize,
    /// Stabilizer to shift by; synthesized when absent and the open loop is unstable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<FeedbackStrategy>,
}

impl Default for CareOptions {
    fn default() -> Self {
        Self {
            cdre: CdreOptions::default(),
            cdre_tol: 1e-9,
            t_max: 1024.0,
            residual_tol: 1e-10,
            max_newton: 20,
            sigma: None,
        }
    }
}

/// Synthesizes a stabilizer `Gamma` from the normalized Riccati equations.
pub fn synthesize_stabilizer(problem: &ProblemSpec, options: &CareOptions) -> Result<FeedbackStrategy> {
    let normalized = normalized_problem(problem)?;
    let log = match sweep_to_convergence(&normalized, &options.cdre, options.cdre_tol, options.t_max) {
        Ok(Ok((p, _))) => {
            let gains = optimal_gains(&normalized, &p)?;
            let sys = LinearSystem::with_gains(problem, &gains);
            let cert = stability::check_l2_stable(&sys)?;
            if !cert.stable {
                return Err(Error::NotStabilizable(
                    "normalized Riccati limit does not yield a stabilizing gain".into(),
                ));
            }
            return Ok(FeedbackStrategy::from_gains(gains));
        }
        Ok(Err(log)) => log,
        Err(Error::Blowup { time, norm }) => {
            return Err(Error::NotStabilizable(format!(
                "normalized Riccati sweep escaped at T = {time:.3} (|P|_F = {norm:.3e})"
            )))
        }
        Err(e) => return Err(e),
    };
    let last = log.last().map_or(f64::NAN, |c| c.change);
    Err(Error::NotStabilizable(format!(
        "normalized Riccati sweep did not converge by T = {} (last change {last:.3e})",
        options.t_max
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewtonOutcome {
    pub p: CoupledMatrixSet,
    pub iterations: usize,
    /// Max residual before the first step and after each accepted step.
    pub residual_history: Vec<f64>,
    pub warnings: Vec<String>,
}

fn max_residual(problem: &ProblemSpec, p: &CoupledMatrixSet) -> f64 {
    residual_norms(problem, p).into_iter().fold(0.0, f64::max)
}

/// Kleinman-Newton polish: each step solves the closed-loop Lyapunov equation with the
/// current Riccati residual as forcing.
pub fn newton_refine(
    problem: &ProblemSpec,
    p0: &CoupledMatrixSet,
    options: &CareOptions,
) -> Result<NewtonOutcome> {
    check_set(problem, p0)?;
    for (i, margin) in n_margins(problem, p0).into_iter().enumerate() {
        if !(margin > 0.0) {
            return Err(Error::NBreakdown { regime: i, time: 0.0, min_eig: margin });
        }
    }
    let mut best = p0.clone();
    let mut best_res = max_residual(problem, p0);
    let mut history = vec![best_res];
    let mut warnings = Vec::new();
    let mut iterations = 0;
    while best_res > options.residual_tol && iterations < options.max_newton {
        let gains = optimal_gains(problem, &best)?;
        let sys = LinearSystem::with_gains(problem, &gains);
        let (stable, _, _) = stability::lyapunov_verdict(&sys);
        if !stable {
            if iterations == 0 {
                return Err(Error::LostStability { iteration: 0 });
            }
            warnings.push(format!("closed loop lost stability at Newton iteration {iterations}"));
            break;
        }
        let forcing = CoupledMatrixSet::new(
            (0..problem.regimes_count())
                .map(|i| residual_matrix(problem, &best, i).expect("N checked invertible"))
                .collect(),
        );
        let delta = match stability::solve_coupled_lyapunov(&sys, &forcing) {
            Ok(d) => d,
            Err(e) => {
                warnings.push(format!("Newton step failed: {e}"));
                break;
            }
        };
        let candidate = CoupledMatrixSet::new(
            best.entries().iter().zip(delta.entries()).map(|(p, d)| p + d).collect(),
        );
        if n_margins(problem, &candidate).iter().any(|m| !(*m > 0.0)) {
            warnings.push(format!("N lost definiteness at Newton iteration {}", iterations + 1));
            break;
        }
        let res = max_residual(problem, &candidate);
        iterations += 1;
        if !(res < best_res) {
            break;
        }
        best = candidate;
        best_res = res;
        history.push(res);
    }
    Ok(NewtonOutcome { p: best, iterations, residual_history: history, warnings })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomotopyLeg {
    pub eps: f64,
    /// `max_i |P_eps - P_2eps|_F`; absent for the first leg.
    pub change: Option<f64>,
    pub norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveTrace {
    pub stabilizer_source: String,
    pub checkpoints: Vec<CdreCheckpoint>,
    pub newton_residuals: Vec<f64>,
    pub newton_iterations: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub homotopy: Vec<HomotopyLeg>,
}

/// A converged Riccati solution with its diagnostics (the solve report artifact).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CareSolution {
    pub p: CoupledMatrixSet,
    /// `|E_i(P)|_F` per regime.
    pub residuals: Vec<f64>,
    /// Smallest eigenvalue of `N(P,i)` per regime.
    pub n_margins: Vec<f64>,
    pub theta: FeedbackStrategy,
    /// The stabilizer the problem was shifted by.
    pub sigma: FeedbackStrategy,
    pub stabilizing: bool,
    pub trace: SolveTrace,
    pub options: CareOptions,
    pub wall_time_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verification: Option<VerificationReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

pub type SolveReport = CareSolution;

/// Solves the constrained CAREs of a uniformly convex problem.
pub fn solve_care(problem: &ProblemSpec, options: &CareOptions) -> Result<CareSolution> {
    let started = Instant::now();
    let (l, m, n) = (problem.regimes_count(), problem.m, problem.n);
    let mut warnings = Vec::new();

    let (sigma, source) = match &options.sigma {
        Some(s) => {
            let sys = LinearSystem::closed_loop(problem, s)?;
            if !stability::check_l2_stable(&sys)?.stable {
                return Err(Error::NotStabilizable("supplied shift is not a stabilizer".into()));
            }
            (FeedbackStrategy::from_gains(s.theta.clone()), "user")
        }
        None => {
            if stability::check_l2_stable(&LinearSystem::open_loop(problem))?.stable {
                (FeedbackStrategy::zeros(l, m, n), "open-loop stable")
            } else {
                (synthesize_stabilizer(problem, options)?, "synthesized")
            }
        }
    };
    let shifted = shift_problem(problem, &sigma)?;

    let (p_cdre, checkpoints) = match sweep_to_convergence(&shifted, &options.cdre, options.cdre_tol, options.t_max)? {
        Ok(done) => done,
        Err(log) => {
            let last = log.last().map_or(f64::NAN, |c| c.change);
            warnings.push(format!(
                "Riccati sweep did not settle to {:.1e} by T = {} (last change {last:.3e})",
                options.cdre_tol, options.t_max
            ));
            let mut sweep = CdreSweep::new(&shifted, CoupledMatrixSet::zeros(l, n), options.cdre.clone());
            sweep.advance_to(options.t_max)?;
            (sweep.state, log)
        }
    };

    let refined = newton_refine(problem, &p_cdre, options)?;
    warnings.extend(refined.warnings.iter().cloned());
    let p = refined.p;

    let shifted_gains = optimal_gains(&shifted, &p)?;
    let theta: Vec<Mat> = shifted_gains.iter().zip(&sigma.theta).map(|(g, s)| g + s).collect();
    let cert = stability::check_l2_stable(&LinearSystem::with_gains(problem, &theta))?;
    let residuals = residual_norms(problem, &p);
    if !cert.stable {
        return Err(Error::NotStabilizingSolution(format!(
            "closed loop has spectral abscissa {:?}; residuals {residuals:?}",
            cert.spectral_abscissa
        )));
    }
    Ok(CareSolution {
        residuals,
        n_margins: n_margins(problem, &p),
        p,
        theta: FeedbackStrategy::from_gains(theta),
        sigma,
        stabilizing: true,
        trace: SolveTrace {
            stabilizer_source: source.into(),
            checkpoints,
            newton_residuals: refined.residual_history,
            newton_iterations: refined.iterations,
            homotopy: Vec::new(),
        },
        options: options.clone(),
        wall_time_s: started.elapsed().as_secs_f64(),
        verification: None,
        warnings,
    })
}

fn with_control_weight_shift(problem: &ProblemSpec, eps: f64) -> Result<ProblemSpec> {
    let mut shifted = problem.clone();
    for reg in &mut shifted.regimes {
        reg.r += Mat::identity(problem.m, problem.m) * eps;
    }
    ProblemSpec::new(shifted.n, shifted.m, shifted.generator, shifted.regimes, shifted.discount_r)
}

/// Convergence limits of the epsilon homotopy.
const HOMOTOPY_STEP_TOL: f64 = 1e-7;
const HOMOTOPY_EPS_FLOOR: f64 = 1e-10;
const HOMOTOPY_NORM_LIMIT: f64 = 1e10;

/// Solves merely convex problems as the limit of `R + eps I`, `eps = eps0 2^-k`.
pub fn solve_care_eps_homotopy(problem: &ProblemSpec, eps0: f64, options: &CareOptions) -> Result<CareSolution> {
    if !(eps0 > 0.0) {
        return Err(Error::Validation(format!("eps0 must be positive, got {eps0}")));
    }
    let started = Instant::now();
    let mut warnings = Vec::new();
    let first = solve_care(&with_control_weight_shift(problem, eps0)?, options)?;
    let mut legs = vec![HomotopyLeg { eps: eps0, change: None, norm: first.p.max_norm() }];
    let mut checkpoints = first.trace.checkpoints.clone();
    let sigma = first.sigma.clone();
    let mut current = first.p;
    let mut eps = eps0;
    loop {
        if eps < HOMOTOPY_EPS_FLOOR {
            break;
        }
        eps *= 0.5;
        let leg_problem = with_control_weight_shift(problem, eps)?;
        let warm = newton_refine(&leg_problem, &current, options)
            .ok()
            .filter(|o| o.residual_history.last().is_some_and(|r| *r <= options.residual_tol));
        let next = match warm {
            Some(o) => o.p,
            None => {
                let mut leg_options = options.clone();
                leg_options.sigma = Some(sigma.clone());
                let sol = solve_care(&leg_problem, &leg_options).map_err(|e| match e {
                    Error::Blowup { norm, .. } => Error::HomotopyDiverged { eps, norm },
                    other => other,
                })?;
                checkpoints.extend(sol.trace.checkpoints);
                sol.p
            }
        };
        let change = next.max_distance(&current);
        let norm = next.max_norm();
        legs.push(HomotopyLeg { eps, change: Some(change), norm });
        if !(norm <= HOMOTOPY_NORM_LIMIT) {
            return Err(Error::HomotopyDiverged { eps, norm });
        }
        current = next;
        if change <= HOMOTOPY_STEP_TOL {
            break;
        }
    }

    // Polish on the original weights when N stays invertible at the limit.
    let scale = (0..problem.regimes_count())
        .map(|i| linalg::max_eigenvalue(&n_of(problem, &current, i)).abs())
        .fold(0.0, f64::max);
    let invertible = n_margins(problem, &current).iter().all(|m| *m > PINV_RANK_TOL * scale.max(1.0));
    let mut newton_residuals = Vec::new();
    let mut newton_iterations = 0;
    if invertible {
        match newton_refine(problem, &current, options) {
            Ok(o) => {
                newton_residuals = o.residual_history;
                newton_iterations = o.iterations;
                warnings.extend(o.warnings);
                current = o.p;
            }
            Err(e) => warnings.push(format!("polish at eps = 0 skipped: {e}")),
        }
    }

    let report = verify_care(problem, &current, None)?;
    if !report.accepted {
        return Err(Error::VerificationRejected(Box::new(report)));
    }
    Ok(CareSolution {
        residuals: report.regimes.iter().map(|r| r.riccati_residual).collect(),
        n_margins: report.regimes.iter().map(|r| r.min_eig_n).collect(),
        p: current,
        theta: report.gain.clone(),
        sigma,
        stabilizing: report.stabilizing,
        trace: SolveTrace {
            stabilizer_source: first.trace.stabilizer_source,
            checkpoints,
            newton_residuals,
            newton_iterations,
            homotopy: legs,
        },
        options: options.clone(),
        wall_time_s: started.elapsed().as_secs_f64(),
        verification: Some(report),
        warnings,
    })
}

/// Acceptance thresholds of [`verify_care`].
pub const VERIFY_RESIDUAL_TOL: f64 = 1e-8;
pub const VERIFY_N_FLOOR: f64 = -1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeVerification {
    /// `|M - L N^+ L^T|_F`.
    pub riccati_residual: f64,
    /// `|L (I - N N^+)|_F`.
    pub range_residual: f64,
    pub min_eig_n: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub regimes: Vec<RegimeVerification>,
    /// `K(Pi) = -N^+ L^T + (I - N^+ N) Pi`.
    pub gain: FeedbackStrategy,
    pub stabilizing: bool,
    pub spectral_abscissa: Option<f64>,
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// Checks the constrained CAREs (pseudoinverse form) and the stabilizing property of
/// `K(Pi)`, with `Pi = 0` unless supplied.
pub fn verify_care(problem: &ProblemSpec, p: &CoupledMatrixSet, pi: Option<&[Mat]>) -> Result<VerificationReport> {
    check_set(problem, p)?;
    let (l, m, n) = (problem.regimes_count(), problem.m, problem.n);
    if let Some(pi) = pi {
        if pi.len() != l || pi.iter().any(|x| x.shape() != (m, n)) {
            return Err(Error::Dimension(format!("Pi must hold {l} matrices of size {m}x{n}")));
        }
    }
    let mut regimes = Vec::with_capacity(l);
    let mut gains = Vec::with_capacity(l);
    for i in 0..l {
        let nm = n_of(problem, p, i);
        let lm = l_of(problem, p, i);
        let n_pinv = linalg::pinv_sym(&nm, PINV_RANK_TOL);
        let riccati = m_of(problem, p, i) - &lm * &n_pinv * lm.transpose();
        let eye = Mat::identity(m, m);
        let range = &lm * (&eye - &nm * &n_pinv);
        regimes.push(RegimeVerification {
            riccati_residual: riccati.norm(),
            range_residual: range.norm(),
            min_eig_n: linalg::min_eigenvalue(&nm),
        });
        let mut k = -(&n_pinv * lm.transpose());
        if let Some(pi) = pi {
            k += (&eye - &n_pinv * &nm) * &pi[i];
        }
        gains.push(k);
    }
    let cert = stability::check_l2_stable(&LinearSystem::with_gains(problem, &gains))?;
    let mut notes = Vec::new();
    if !cert.stable {
        notes.push(if pi.is_none() {
            "stabilizing Pi not found (checked Pi = 0 only)".to_string()
        } else {
            "supplied Pi does not stabilize".to_string()
        });
    }
    let residuals_ok = regimes
        .iter()
        .all(|r| r.riccati_residual <= VERIFY_RESIDUAL_TOL && r.range_residual <= VERIFY_RESIDUAL_TOL);
    let n_ok = regimes.iter().all(|r| r.min_eig_n >= VERIFY_N_FLOOR);
    Ok(VerificationReport {
        accepted: residuals_ok && n_ok && cert.stable,
        regimes,
        gain: FeedbackStrategy::from_gains(gains),
        stabilizing: cert.stable,
        spectral_abscissa: cert.spectral_abscissa,
        notes,
    })
}
