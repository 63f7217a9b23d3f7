use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Mesh file could not be parsed; carries the 1-based line number.
    #[error("mesh format error at line {line}: {msg}")]
    MeshFormat { line: usize, msg: String },

    /// Mesh parsed but fails a consistency check (tags, orientation, ...).
    #[error("mesh validation error: {0}")]
    MeshValidation(String),

    /// Scenario or solver configuration is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// Direct sparse solve failed (singular matrix, pivot breakdown, ...).
    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    /// A numerical routine left its domain of validity (eigensolve stall,
    /// non-finite values, ...).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Newton (or a per-cell nonlinear update) exhausted its budget.
    #[error(
        "nonlinear solve did not converge after {iterations} iterations \
         (last residual norm {residual_norm:.3e}{})",
        .epsilon_reached.map(|e| format!(", last successful epsilon {e}")).unwrap_or_default()
    )]
    NonConvergence {
        iterations: usize,
        residual_norm: f64,
        /// Last regularization width that did converge, when a continuation
        /// schedule was in flight.
        epsilon_reached: Option<f64>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
