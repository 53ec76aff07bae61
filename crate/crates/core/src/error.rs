use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Invalid user-supplied configuration (mesh, covariance, weights, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's precondition (shapes, ranges, ordering).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An iterative numerical routine did not reach its tolerance.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// An optimizer or flow produced a non-finite or exploding iterate.
    #[error("divergence at iteration {iteration}: {reason}")]
    Divergence { iteration: usize, reason: String },

    /// A library invariant failed (e.g. a non-positive Jacobian entry).
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// The constructive approximation left its admissible set.
    #[error("approximation error on interval {interval}: {reason}")]
    Approximation { interval: usize, reason: String },

    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;
