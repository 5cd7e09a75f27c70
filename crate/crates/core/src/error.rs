use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown potential family `{0}`")]
    UnknownFamily(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("parse error at column {column}: {message}")]
    Parse { column: usize, message: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("grid of {points} points cannot resolve {modes} modes (need at least {})", 2 * .modes + 1)]
    Aliasing { points: usize, modes: usize },

    #[error(
        "potential curvature bound is not certified ({0}); pass allow_uncertified to run anyway"
    )]
    Uncertified(String),

    #[error("tail Hessian block is not positive definite (smallest eigenvalue {min_eigenvalue:.6e}); cutoff below the monotonicity threshold or truncation too coarse")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("tail solve did not converge after {iterations} iterations (best residual {residual:.3e})")]
    TailNotConverged { iterations: usize, residual: f64 },

    #[error("mode list would hold {count} modes, above the cap of {cap}")]
    ModeCap { count: usize, cap: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
