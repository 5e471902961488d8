use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("optimal-policy search did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error(
        "power iteration did not converge after {iterations} iterations (residual {residual:e}); \
         the chain is probably periodic or reducible"
    )]
    StationaryNotConverged { iterations: usize, residual: f64 },

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("invalid prior: {0}")]
    InvalidPrior(String),

    #[error("features are linearly dependent (smallest singular value {0:e})")]
    LinearDependence(f64),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("size cap exceeded: {0}")]
    SizeCap(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String, trace: Vec<crate::feature_opt::TracePoint> },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
