//! Closed-loop strategies, value functions, the stationary adjoint for regime-constant
//! offsets, and the reduction of discounted problems.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::model::{CoupledMatrixSet, FeedbackStrategy, ProblemSpec};
use crate::riccati::{self, CareSolution};

/// Tolerance for the range condition on the offset when `N` is singular.
pub const RANGE_TOL: f64 = 1e-9;

/// Adjoint under the ansatz `eta(t) = v(alpha_t)`, `zeta = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryAdjoint {
    #[serde(with = "crate::model::serde_mat::vectors")]
    pub v: Vec<Vector>,
}

impl StationaryAdjoint {
    pub fn zeros(l: usize, n: usize) -> Self {
        Self { v: vec![Vector::zeros(n); l] }
    }

    /// `zeta` vanishes identically under the ansatz.
    pub fn zeta(&self) -> Vector {
        Vector::zeros(self.v.first().map_or(0, Vector::len))
    }

    /// Jump component at regime `i` towards regime `j`: `v(j) - v(i)`.
    pub fn z(&self, i: usize, j: usize) -> Vector {
        &self.v[j] - &self.v[i]
    }
}

/// `rho~(i) = B^T v(i) + D^T zeta + D^T P(i) sigma(i) + rho(i)` with `zeta = 0`.
pub fn rho_tilde(problem: &ProblemSpec, p: &CoupledMatrixSet, adjoint: Option<&StationaryAdjoint>, i: usize) -> Vector {
    let reg = &problem.regimes[i];
    let mut out = reg.d.transpose() * (&p[i] * reg.sigma_vec()) + reg.rho_vec();
    if let Some(adj) = adjoint {
        out += reg.b.transpose() * &adj.v[i];
    }
    out
}

/// Solves `F(i) v(i) + sum_j pi_ij v(j) + h(i) = 0` with
/// `F = A^T - L N^{-1} B^T` and
/// `h = (C^T - L N^{-1} D^T) P sigma - L N^{-1} rho + P b + q`
/// (`N^+` in place of `N^{-1}` when `N` is singular).
pub fn solve_stationary_adjoint(problem: &ProblemSpec, care: &CareSolution) -> Result<StationaryAdjoint> {
    let (l, n) = (problem.regimes_count(), problem.n);
    let p = &care.p;
    let mut big = Mat::zeros(n * l, n * l);
    let mut rhs = Vector::zeros(n * l);
    for i in 0..l {
        let reg = &problem.regimes[i];
        let nm = riccati::n_of(problem, p, i);
        let lm = riccati::l_of(problem, p, i);
        // L N^{-1} (L N^+ when N is singular)
        let ln = if linalg::is_positive_definite(&nm) {
            linalg::solve_mat(&nm, &lm.transpose()).ok_or(Error::SingularSystem)?.transpose()
        } else if linalg::min_eigenvalue(&nm) >= riccati::VERIFY_N_FLOOR {
            &lm * linalg::pinv_sym(&nm, riccati::PINV_RANK_TOL)
        } else {
            return Err(Error::Precondition(format!("N(P,{i}) is indefinite")));
        };
        let f = reg.a.transpose() - &ln * reg.b.transpose();
        let psig = &p[i] * reg.sigma_vec();
        let h = (reg.c.transpose() - &ln * reg.d.transpose()) * &psig - &ln * reg.rho_vec()
            + &p[i] * reg.b_vec()
            + reg.q_vec();
        let mut block = big.view_mut((i * n, i * n), (n, n));
        block += &f;
        for j in 0..l {
            let rate = problem.generator.rate(i, j);
            if rate != 0.0 {
                let mut b = big.view_mut((i * n, j * n), (n, n));
                b += Mat::identity(n, n) * rate;
            }
        }
        rhs.rows_mut(i * n, n).copy_from(&(-h));
    }
    if rhs.iter().all(|x| *x == 0.0) {
        return Ok(StationaryAdjoint::zeros(l, n));
    }
    let sol = linalg::lu_solve(&big, &rhs).ok_or(Error::SingularSystem)?;
    Ok(StationaryAdjoint { v: (0..l).map(|i| sol.rows(i * n, n).into_owned()).collect() })
}

/// Optimal feedback `Theta^` from the Riccati solution and offsets
/// `nu^(i) = -N^+ rho~(i)` (zero for homogeneous problems).
pub fn build_closed_loop(problem: &ProblemSpec, care: &CareSolution) -> Result<FeedbackStrategy> {
    let (l, m, n) = (problem.regimes_count(), problem.m, problem.n);
    care.theta.check_dims(l, m, n)?;
    if problem.is_homogeneous() {
        return Ok(FeedbackStrategy::from_gains(care.theta.theta.clone()));
    }
    let adjoint = solve_stationary_adjoint(problem, care)?;
    let nu = offsets(problem, &care.p, &adjoint)?;
    Ok(FeedbackStrategy { theta: care.theta.theta.clone(), nu })
}

fn offsets(problem: &ProblemSpec, p: &CoupledMatrixSet, adjoint: &StationaryAdjoint) -> Result<Vec<Vector>> {
    (0..problem.regimes_count())
        .map(|i| {
            let nm = riccati::n_of(problem, p, i);
            let rt = rho_tilde(problem, p, Some(adjoint), i);
            match linalg::solve_mat(&nm, &Mat::from_column_slice(rt.len(), 1, rt.as_slice())) {
                Some(x) if linalg::is_positive_definite(&nm) => Ok(-x.column(0).into_owned()),
                _ => {
                    let pinv = linalg::pinv_sym(&nm, riccati::PINV_RANK_TOL);
                    let defect = (&rt - &nm * (&pinv * &rt)).norm();
                    if defect > RANGE_TOL * (1.0 + rt.norm()) {
                        return Err(Error::SingularN { regime: i, defect });
                    }
                    Ok(-(pinv * rt))
                }
            }
        })
        .collect()
}

/// `A -> A - (r/2) I`, discount removed. Offsets are only carried when `r = 0`.
pub fn discount_transform(problem: &ProblemSpec) -> Result<ProblemSpec> {
    let r = problem.discount_r;
    if r == 0.0 {
        return Ok(problem.clone());
    }
    if !problem.is_homogeneous() {
        return Err(Error::UnsupportedInhomogeneous(r));
    }
    let mut out = problem.clone();
    for reg in &mut out.regimes {
        reg.a -= Mat::identity(problem.n, problem.n) * (0.5 * r);
    }
    out.discount_r = 0.0;
    Ok(out)
}

/// Strategy for the discounted problem from the strategy of its transform: the gains
/// carry over unchanged; nonzero offsets would need `e^{rt/2}` modulation and are refused.
pub fn undiscount_strategy(strategy: &FeedbackStrategy, r: f64) -> Result<FeedbackStrategy> {
    if r != 0.0 && strategy.has_offsets() {
        return Err(Error::UnsupportedInhomogeneous(r));
    }
    Ok(strategy.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueReport {
    pub p: CoupledMatrixSet,
    pub adjoint: Option<StationaryAdjoint>,
    /// Integral (state-independent) part of the value; `None` when it diverges.
    pub constant_term: Option<f64>,
    pub constant_term_available: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl ValueReport {
    /// `<P(i) x, x> + 2 <v(i), x>` (+ the constant term when it is finite).
    pub fn evaluate(&self, x: &Vector, i: usize) -> f64 {
        let mut value = x.dot(&(&self.p[i] * x));
        if let Some(adj) = &self.adjoint {
            value += 2.0 * adj.v[i].dot(x);
        }
        value + self.constant_term.unwrap_or(0.0)
    }
}

pub fn value_function(
    problem: &ProblemSpec,
    care: &CareSolution,
    adjoint: Option<&StationaryAdjoint>,
) -> Result<ValueReport> {
    if problem.is_homogeneous() {
        return Ok(ValueReport {
            p: care.p.clone(),
            adjoint: None,
            constant_term: Some(0.0),
            constant_term_available: true,
            notes: Vec::new(),
        });
    }
    let adjoint = match adjoint {
        Some(a) => a.clone(),
        None => solve_stationary_adjoint(problem, care)?,
    };
    Ok(ValueReport {
        p: care.p.clone(),
        adjoint: Some(adjoint),
        constant_term: None,
        constant_term_available: false,
        notes: vec![
            "constant term diverges for regime-constant offsets on an infinite horizon; \
             only the state-dependent part is reported"
                .into(),
        ],
    })
}
