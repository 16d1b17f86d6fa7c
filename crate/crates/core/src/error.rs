use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A parameter is outside its admissible domain.
    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    /// Input data is missing something an operation needs.
    #[error("missing data: {0}")]
    Data(String),

    /// A test function reaches outside the simulated window.
    #[error("domain error: {0}")]
    Domain(String),

    /// Exact state space would exceed the configured cap.
    #[error("state space of {states} states exceeds the cap of {cap}")]
    Capacity { states: usize, cap: usize },

    /// Too much probability mass reached the clipped counters.
    #[error("clipped mass {clipped:.3e} exceeds tolerance {tolerance:.3e}; increase the counter bounds")]
    Accuracy { clipped: f64, tolerance: f64 },

    /// Conjugate gradient hit its iteration cap.
    #[error("solver did not converge after {iterations} iterations (relative gradient {residual:.3e})")]
    Solver { iterations: usize, residual: f64 },

    /// Two discretizations do not fit together.
    #[error("grid mismatch: {0}")]
    Grid(String),

    /// A statistic was requested from too few samples.
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Error {
    Error::Parameter {
        name,
        reason: reason.into(),
    }
}

pub(crate) fn check_density(rho: f64) -> Result<()> {
    if rho > 0.0 && rho < 1.0 {
        Ok(())
    } else {
        Err(param("rho", format!("must lie in (0,1), got {rho}")))
    }
}
