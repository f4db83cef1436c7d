//! Error types shared across the solver modules.

use thiserror::Error;

/// Errors produced by model validation, simulation, and the solvers.
#[derive(Debug, Error)]
pub enum CoreError {
    /// A precondition on an operation's arguments was violated.
    #[error("domain error: {0}")]
    Domain(String),

    /// Model parameters or configuration failed validation.
    #[error("validation error: {field}: {msg}")]
    Validation { field: String, msg: String },

    /// Closed-form expressions require strictly positive volatility.
    #[error("degenerate volatility: {0}")]
    DegenerateVolatility(String),

    /// The bisection bracket never produced a sign change.
    #[error("solver error at knot {knot} (t = {t}): no sign change on [{lo}, {hi}]: {msg}")]
    Solver {
        knot: usize,
        t: f64,
        lo: f64,
        hi: f64,
        msg: String,
    },

    /// A Monte Carlo estimate or quadrature value was not finite.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// The transformed integrand of the general-R root equation does not decay.
    #[error("non-integrable marginal: {0}")]
    NonIntegrableMarginal(String),

    /// The capacity grid of the stopping oracle does not cover the boundary.
    #[error("coverage error: {0}")]
    Coverage(String),

    /// Two objects that must share a grid were built on different grids.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        CoreError::Domain(msg.into())
    }

    pub(crate) fn validation(field: impl Into<String>, msg: impl Into<String>) -> Self {
        CoreError::Validation {
            field: field.into(),
            msg: msg.into(),
        }
    }
}
