use std::path::PathBuf;

use thiserror::Error;

use crate::riccati::VerificationReport;

/// Errors produced anywhere in the solver pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("invalid problem: {0}")]
    Validation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot serialize non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("stacked operator is numerically singular ({0})")]
    SingularOperator(String),

    #[error("eigenvalue iteration did not converge")]
    EigenFailure,

    #[error("internal consistency failure: {0}")]
    Internal(String),

    #[error("N(P,{regime}) lost positive definiteness at t = {time:.6} (min eigenvalue {min_eig:.3e})")]
    NBreakdown {
        regime: usize,
        time: f64,
        min_eig: f64,
    },

    #[error("Riccati sweep blew up at t = {time:.6} (|P|_F = {norm:.3e})")]
    Blowup { time: f64, norm: f64 },

    #[error("system is not stabilizable: {0}")]
    NotStabilizable(String),

    #[error("converged P is not a stabilizing solution: {0}")]
    NotStabilizingSolution(String),

    #[error("Newton iterate lost closed-loop stability at iteration {iteration}")]
    LostStability { iteration: usize },

    #[error("epsilon homotopy diverged at eps = {eps:.3e} (|P|_F = {norm:.3e})")]
    HomotopyDiverged { eps: f64, norm: f64 },

    #[error("candidate rejected by constrained Riccati verification")]
    VerificationRejected(Box<VerificationReport>),

    #[error("N(P,{regime}) is singular and the offset term lies outside its range (defect {defect:.3e})")]
    SingularN { regime: usize, defect: f64 },

    #[error("stationary adjoint system is singular")]
    SingularSystem,

    #[error("inhomogeneous terms are not supported together with discounting (r = {0})")]
    UnsupportedInhomogeneous(f64),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("simulation overflow on {:.2}% of paths", .fraction * 100.0)]
    Overflow {
        fraction: f64,
        result: Box<crate::mcsim::SimResult>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
