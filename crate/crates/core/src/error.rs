//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by calibration, simulation and I/O routines.
#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates a documented precondition.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Constraints are mutually contradictory; no solution exists.
    #[error("infeasible problem: {0}")]
    Infeasible(String),

    /// Iterative scaling did not reach the requested tolerance.
    #[error("iterative scaling did not converge after {sweeps} sweeps (last residual {last:.3e})")]
    NonConvergence {
        sweeps: usize,
        last: f64,
        /// Max relative row residual after each sweep.
        history: Vec<f64>,
    },

    /// A numerical routine (ODE solve, eigendecomposition, ...) failed.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Parse failure with file/line context.
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn infeasible(msg: impl Into<String>) -> Self {
        Error::Infeasible(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Process exit code used by the CLI: 1 for validation/I-O, 2 for numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invalid(_) | Error::Infeasible(_) | Error::Io(_) | Error::Parse { .. } => 1,
            Error::NonConvergence { .. } | Error::Numerical(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
