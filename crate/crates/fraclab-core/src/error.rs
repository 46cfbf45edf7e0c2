//! Error type shared by all modules of the crate.

use thiserror::Error;

/// Errors reported by grid operations, coefficient constructors and solvers.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("component count mismatch: expected {expected}, got {got}")]
    ComponentMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix at grid point {point} is not symmetric (max asymmetry {asymmetry:.3e})")]
    NotSymmetric { point: usize, asymmetry: f64 },

    #[error("matrix at grid point {point} is not positive definite (eigenvalue {eigenvalue:.3e})")]
    NotPositiveDefinite { point: usize, eigenvalue: f64 },

    #[error(
        "solver did not converge within {iterations} iterations (gradient norm {gradient_norm:.3e}, tol {tol:.3e})"
    )]
    NoConvergence {
        iterations: usize,
        gradient_norm: f64,
        tol: f64,
        /// Last iterate, so callers can inspect or restart from it.
        last_report: Box<crate::solver::SolveReport>,
    },

    #[error("empty region: {0}")]
    EmptyRegion(String),

    #[error("measurement budget exhausted after {spent} forward solves")]
    BudgetExhausted { spent: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
