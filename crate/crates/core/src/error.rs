use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    /// SVD or eigensolver failed to converge.
    #[error("{op} failed to converge on a {rows}x{cols} matrix (frobenius norm {norm:.3e}, max |entry| {max_abs:.3e})")]
    Numerical {
        op: &'static str,
        rows: usize,
        cols: usize,
        norm: f64,
        max_abs: f64,
    },

    /// Iterates crossed the overflow threshold.
    #[error("diverged at step {step} (magnitude {magnitude:.3e})")]
    Divergence { step: usize, magnitude: f64 },

    #[error("pole at beta = 1 (got beta = {beta}, guard band {guard:e})")]
    Pole { beta: f64, guard: f64 },

    #[error("interference level r = 0 makes the shifted-block constants singular")]
    InterferencePole,

    #[error("fixed point infeasible: {0}")]
    Infeasible(String),

    #[error("batch was generated without per-prompt covariances; regenerate with covariance storage")]
    MissingCovariances,

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
