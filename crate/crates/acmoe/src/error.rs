use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric: max |a_ij - a_ji| = {max_asymmetry:.3e} exceeds {tolerance:.1e}")]
    NotSymmetric { max_asymmetry: f64, tolerance: f64 },

    #[error("eigensolve did not converge after {sweeps} sweeps (off-diagonal norm {off_norm:.3e})")]
    EigenNoConvergence { sweeps: usize, off_norm: f64 },

    #[error("matrix dimension {dim} exceeds the supported maximum {max}")]
    DimensionTooLarge { dim: usize, max: usize },

    #[error("matrix is numerically singular: smallest eigenvalue {lambda_min:.3e} <= {floor:.1e}")]
    Singular { lambda_min: f64, floor: f64 },

    #[error("covariance is not positive semi-definite (pivot {pivot:.3e} at column {col})")]
    NotPsd { pivot: f64, col: usize },

    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },

    #[error("empty input: {context}")]
    EmptyInput { context: String },

    #[error("invalid argument: {context}")]
    InvalidArgument { context: String },

    #[error("root solver failed: {context} (bracket [{lo:.6e}, {hi:.6e}], phi(lo)={phi_lo:.6e}, phi(hi)={phi_hi:.6e})")]
    RootSolver {
        context: String,
        lo: f64,
        hi: f64,
        phi_lo: f64,
        phi_hi: f64,
    },

    #[error("instance too large for enumeration: {context}")]
    InstanceTooLarge { context: String },

    #[error("missing forward cache: run the forward pass before backward")]
    MissingCache,

    #[error("training diverged at step {step}: {context}")]
    Divergence { step: u64, context: String },

    #[error("degenerate variance: quadratic form {value:.3e} is not positive")]
    DegenerateVariance { value: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(context: impl Into<String>) -> Self {
        Error::ShapeMismatch { context: context.into() }
    }

    pub fn invalid(context: impl Into<String>) -> Self {
        Error::InvalidArgument { context: context.into() }
    }
}
