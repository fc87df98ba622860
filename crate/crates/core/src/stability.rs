//! L2 (mean-square) stability of regime-switching linear systems.
//!
//! The primary verdict comes from the coupled Lyapunov equations
//!
//! ```text
//! P(i) A(i) + A(i)^T P(i) + C(i)^T P(i) C(i) + Lambda(i) + sum_j pi_ij P(j) = 0
//! ```
//!
//! solved once on the stacked `n^2 L` vectorized system. The stacked second-moment
//! generator (the adjoint operator, coupled through `pi_ji`) gives an independent
//! spectral verdict that must agree.

use nalgebra::Schur;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, kron, unvec, vec_of, Mat, Vector};
use crate::mcsim::{self, SimulationConfig};
use crate::model::{CoupledMatrixSet, FeedbackStrategy, Generator, ProblemSpec};

/// Eigenvalue margin under which a Lyapunov witness is considered a boundary case.
pub const BOUNDARY_MARGIN: f64 = 1e-12;
/// Spectral abscissae this close to zero are not used for cross-checking.
pub const SPECTRAL_BAND: f64 = 1e-8;

/// Drift and diffusion matrices of `dX = Abar(alpha) X dt + Cbar(alpha) X dW`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub abar: Vec<Mat>,
    pub cbar: Vec<Mat>,
    pub generator: Generator,
}

impl LinearSystem {
    pub fn new(abar: Vec<Mat>, cbar: Vec<Mat>, generator: Generator) -> Result<Self> {
        let l = generator.regimes();
        if abar.len() != l || cbar.len() != l {
            return Err(Error::Dimension(format!(
                "{} drift / {} diffusion matrices for {l} regimes",
                abar.len(),
                cbar.len()
            )));
        }
        let n = abar[0].nrows();
        for (a, c) in abar.iter().zip(&cbar) {
            if a.shape() != (n, n) || c.shape() != (n, n) {
                return Err(Error::Dimension("system matrices must all be n x n".into()));
            }
        }
        Ok(Self { abar, cbar, generator })
    }

    /// The uncontrolled system `[A, C]`.
    pub fn open_loop(problem: &ProblemSpec) -> Self {
        Self {
            abar: problem.regimes.iter().map(|r| r.a.clone()).collect(),
            cbar: problem.regimes.iter().map(|r| r.c.clone()).collect(),
            generator: problem.generator.clone(),
        }
    }

    /// `[A + B Theta, C + D Theta]` for the gains of `strategy`.
    pub fn closed_loop(problem: &ProblemSpec, strategy: &FeedbackStrategy) -> Result<Self> {
        strategy.check_dims(problem.regimes_count(), problem.m, problem.n)?;
        Ok(Self::with_gains(problem, &strategy.theta))
    }

    pub(crate) fn with_gains(problem: &ProblemSpec, theta: &[Mat]) -> Self {
        Self {
            abar: problem.regimes.iter().zip(theta).map(|(r, t)| &r.a + &r.b * t).collect(),
            cbar: problem.regimes.iter().zip(theta).map(|(r, t)| &r.c + &r.d * t).collect(),
            generator: problem.generator.clone(),
        }
    }

    pub fn n(&self) -> usize {
        self.abar[0].nrows()
    }

    pub fn regimes(&self) -> usize {
        self.abar.len()
    }

    /// `P(i) Abar(i) + Abar(i)^T P(i) + Cbar(i)^T P(i) Cbar(i) + sum_j pi_ij P(j)`.
    pub fn lyapunov_operator(&self, p: &CoupledMatrixSet, i: usize) -> Mat {
        let (a, c) = (&self.abar[i], &self.cbar[i]);
        let mut out = &p[i] * a + a.transpose() * &p[i] + c.transpose() * &p[i] * c;
        for j in 0..self.regimes() {
            let rate = self.generator.rate(i, j);
            if rate != 0.0 {
                out += &p[j] * rate;
            }
        }
        out
    }
}

/// Which test decided a stability verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StabilityMethod {
    Lyapunov,
    Spectral,
    SignSufficient,
    SignNecessary,
}

/// Outcome of the sign screen on `A + A^T + C^T C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignScreen {
    ProvablyStable,
    ProvablyUnstable,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityCertificate {
    pub stable: bool,
    pub method: StabilityMethod,
    pub witness_p: Option<CoupledMatrixSet>,
    pub spectral_abscissa: Option<f64>,
    pub min_eig_p: Option<f64>,
    pub sign_screen: SignScreen,
    /// Extreme eigenvalue of `A(i) + A(i)^T + C(i)^T C(i)` per regime (the largest when
    /// screening for stability, the smallest when the screen proved instability).
    pub sign_values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

fn stacked_lyapunov_matrix(sys: &LinearSystem) -> Mat {
    let n = sys.n();
    let l = sys.regimes();
    let nn = n * n;
    let eye = linalg::identity(n);
    let eye_nn = linalg::identity(nn);
    let mut big = Mat::zeros(nn * l, nn * l);
    for i in 0..l {
        let at = sys.abar[i].transpose();
        let ct = sys.cbar[i].transpose();
        let block = kron(&at, &eye) + kron(&eye, &at) + kron(&ct, &ct);
        add_block(&mut big, i * nn, i * nn, &block);
        for j in 0..l {
            let rate = sys.generator.rate(i, j);
            if rate != 0.0 {
                add_block(&mut big, i * nn, j * nn, &(&eye_nn * rate));
            }
        }
    }
    big
}

/// Stacked matrix of the second-moment generator `S -> A S + S A^T + C S C^T + sum_j pi_ji S_j`.
fn stacked_moment_matrix(sys: &LinearSystem) -> Mat {
    let n = sys.n();
    let l = sys.regimes();
    let nn = n * n;
    let eye = linalg::identity(n);
    let eye_nn = linalg::identity(nn);
    let mut big = Mat::zeros(nn * l, nn * l);
    for i in 0..l {
        let (a, c) = (&sys.abar[i], &sys.cbar[i]);
        let block = kron(&eye, a) + kron(a, &eye) + kron(c, c);
        add_block(&mut big, i * nn, i * nn, &block);
        for j in 0..l {
            let rate = sys.generator.rate(j, i);
            if rate != 0.0 {
                add_block(&mut big, i * nn, j * nn, &(&eye_nn * rate));
            }
        }
    }
    big
}

fn add_block(big: &mut Mat, row: usize, col: usize, block: &Mat) {
    let mut view = big.view_mut((row, col), block.shape());
    view += block;
}

/// Solves the coupled Lyapunov equations for `P` given the forcing `Lambda`.
pub fn solve_coupled_lyapunov(sys: &LinearSystem, lambda: &CoupledMatrixSet) -> Result<CoupledMatrixSet> {
    let n = sys.n();
    let l = sys.regimes();
    if lambda.len() != l || lambda.dim() != n {
        return Err(Error::Dimension(format!(
            "Lambda has {} entries of size {}, expected {l} of size {n}",
            lambda.len(),
            lambda.dim()
        )));
    }
    let nn = n * n;
    let big = stacked_lyapunov_matrix(sys);
    let mut rhs = Vector::zeros(nn * l);
    for i in 0..l {
        rhs.rows_mut(i * nn, nn).copy_from(&(-vec_of(&lambda[i])));
    }
    let sol = linalg::lu_solve(&big, &rhs)
        .ok_or_else(|| Error::SingularOperator(format!("stacked Lyapunov operator of size {}", nn * l)))?;
    let entries = (0..l).map(|i| unvec(&sol.as_slice()[i * nn..(i + 1) * nn], n, n)).collect();
    Ok(CoupledMatrixSet::new(entries))
}

/// Max real part of the spectrum of the stacked second-moment generator.
pub fn spectral_abscissa(sys: &LinearSystem) -> Result<f64> {
    let big = stacked_moment_matrix(sys);
    let dim = big.nrows();
    if dim == 1 {
        return Ok(big[(0, 0)]);
    }
    let schur = Schur::try_new(big, f64::EPSILON, 10_000 + 100 * dim).ok_or(Error::EigenFailure)?;
    let eigs = schur.complex_eigenvalues();
    let max = eigs.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    if max.is_finite() {
        Ok(max)
    } else {
        Err(Error::EigenFailure)
    }
}

/// Per-regime `A(i) + A(i)^T + C(i)^T C(i)` (symmetric).
pub fn sign_matrices(sys: &LinearSystem) -> Vec<Mat> {
    sys.abar
        .iter()
        .zip(&sys.cbar)
        .map(|(a, c)| linalg::symmetrize(&(a + a.transpose() + c.transpose() * c)))
        .collect()
}

/// Sufficient screens: negative definite everywhere is stable, positive definite everywhere
/// is unstable.
pub fn sign_screen(sys: &LinearSystem) -> SignScreen {
    let mats = sign_matrices(sys);
    if mats.iter().all(|m| linalg::max_eigenvalue(m) < 0.0) {
        SignScreen::ProvablyStable
    } else if mats.iter().all(|m| linalg::min_eigenvalue(m) > 0.0) {
        SignScreen::ProvablyUnstable
    } else {
        SignScreen::Inconclusive
    }
}

/// Lyapunov-only verdict used inside iterative solvers; no spectral cross-check.
pub(crate) fn lyapunov_verdict(sys: &LinearSystem) -> (bool, Option<CoupledMatrixSet>, Option<f64>) {
    let lambda = CoupledMatrixSet::identity(sys.regimes(), sys.n());
    match solve_coupled_lyapunov(sys, &lambda) {
        Ok(p) => {
            let min_eig = p.entries().iter().map(linalg::min_eigenvalue).fold(f64::INFINITY, f64::min);
            let pd = p.entries().iter().all(linalg::is_positive_definite);
            (pd && min_eig > BOUNDARY_MARGIN, Some(p), Some(min_eig))
        }
        Err(_) => (false, None, None),
    }
}

/// Certifies L2-stability with a Lyapunov witness for `Lambda = I`, cross-checked against
/// the spectral abscissa.
pub fn check_l2_stable(sys: &LinearSystem) -> Result<StabilityCertificate> {
    let screen = sign_screen(sys);
    let mats = sign_matrices(sys);
    let sign_values = match screen {
        SignScreen::ProvablyUnstable => mats.iter().map(linalg::min_eigenvalue).collect(),
        _ => mats.iter().map(linalg::max_eigenvalue).collect(),
    };
    let (lyap_stable, witness, min_eig) = lyapunov_verdict(sys);
    let abscissa = spectral_abscissa(sys)?;

    let mut warnings = Vec::new();
    if let Some(e) = min_eig {
        if e.abs() <= BOUNDARY_MARGIN {
            warnings.push(format!(
                "Lyapunov witness has min eigenvalue {e:.3e}; boundary case reported as unstable"
            ));
        }
    }
    if witness.is_none() {
        warnings.push("stacked Lyapunov operator is singular".into());
    }
    if abscissa.abs() >= SPECTRAL_BAND && lyap_stable != (abscissa < 0.0) {
        return Err(Error::Internal(format!(
            "Lyapunov verdict (stable = {lyap_stable}) disagrees with spectral abscissa {abscissa:e}"
        )));
    }
    if screen == SignScreen::ProvablyStable && !lyap_stable {
        return Err(Error::Internal("sign screen proved stability but the Lyapunov test failed".into()));
    }
    if screen == SignScreen::ProvablyUnstable && lyap_stable {
        return Err(Error::Internal("sign screen proved instability but a Lyapunov witness exists".into()));
    }

    let method = match screen {
        SignScreen::ProvablyUnstable => StabilityMethod::SignNecessary,
        SignScreen::ProvablyStable => StabilityMethod::SignSufficient,
        SignScreen::Inconclusive if witness.is_some() => StabilityMethod::Lyapunov,
        SignScreen::Inconclusive => StabilityMethod::Spectral,
    };
    Ok(StabilityCertificate {
        stable: lyap_stable,
        method,
        witness_p: witness,
        spectral_abscissa: Some(abscissa),
        min_eig_p: min_eig,
        sign_screen: screen,
        sign_values,
        warnings,
    })
}

/// Monte Carlo check of the representation `P(i) = E int Phi_i^T Lambda(alpha) Phi_i dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationCheck {
    pub lyapunov: CoupledMatrixSet,
    pub estimate: CoupledMatrixSet,
    /// Entry-wise standard error of `estimate`.
    pub stderr: CoupledMatrixSet,
    /// Per regime: max entry-wise `|estimate - P| / max(|P|, tiny)`.
    pub relative_error: Vec<f64>,
    /// Per regime: max entry-wise `|estimate - P| / stderr` (0 where stderr vanishes and
    /// the estimate is exact).
    pub z_scores: Vec<f64>,
}

pub fn lyapunov_representation_check(
    sys: &LinearSystem,
    lambda: &CoupledMatrixSet,
    config: &SimulationConfig,
) -> Result<RepresentationCheck> {
    let (stable, _, _) = lyapunov_verdict(sys);
    if !stable {
        return Err(Error::Precondition("system is not L2-stable".into()));
    }
    if lambda.entries().iter().any(|m| linalg::min_eigenvalue(m) < -1e-12) {
        return Err(Error::Precondition("Lambda must be positive semidefinite".into()));
    }
    let p = solve_coupled_lyapunov(sys, lambda)?;
    let n = sys.n();
    let mut est = Vec::new();
    let mut err = Vec::new();
    let mut rel = Vec::new();
    let mut zs = Vec::new();
    for i in 0..sys.regimes() {
        let (mean, se) = mcsim::fundamental_quadratic_integral(sys, lambda, i, config)?;
        let mut worst_rel = 0.0_f64;
        let mut worst_z = 0.0_f64;
        for r in 0..n {
            for c in 0..n {
                let diff = (mean[(r, c)] - p[i][(r, c)]).abs();
                let scale = p[i][(r, c)].abs().max(1e-300);
                worst_rel = worst_rel.max(diff / scale);
                let z = if se[(r, c)] > 0.0 {
                    diff / se[(r, c)]
                } else if diff <= 1e-12 * (1.0 + scale) {
                    0.0
                } else {
                    f64::INFINITY
                };
                worst_z = worst_z.max(z);
            }
        }
        est.push(mean);
        err.push(se);
        rel.push(worst_rel);
        zs.push(worst_z);
    }
    Ok(RepresentationCheck {
        lyapunov: p,
        estimate: CoupledMatrixSet::new(est),
        stderr: CoupledMatrixSet::new(err),
        relative_error: rel,
        z_scores: zs,
    })
}
