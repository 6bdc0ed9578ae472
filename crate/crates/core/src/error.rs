//! Crate-wide error type.

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Jacobi SVD did not reach the off-diagonal tolerance within the sweep cap.
    #[error(
        "svd did not converge after {sweeps} sweeps (worst off-diagonal ratio {off_diagonal:.3e})"
    )]
    SvdNoConvergence { sweeps: usize, off_diagonal: f64 },

    /// Input is outside the mathematical domain of the operation
    /// (all-zero spectrum, empty sparsity list, ...).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A parameter violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// No transmit power within budget can satisfy the delay target.
    #[error("infeasible link: {0}")]
    InfeasibleLink(String),

    /// A loss or weight became non-finite during a run.
    #[error("numeric failure in {module} at round {round}: {what}")]
    Numeric { module: &'static str, round: usize, what: String },

    /// Malformed checkpoint bytes.
    #[error("codec: {0}")]
    Codec(String),

    /// Malformed or inconsistent experiment configuration.
    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
