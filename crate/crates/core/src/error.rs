use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("point is not on the hyperboloid (constraint residual {residual:e})")]
    OffManifold { residual: f64 },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("unsupported latent dimension {0} (hyperbolic kernels exist for 2 and 3)")]
    UnsupportedDimension(usize),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown taxonomy node `{0}`")]
    UnknownNode(String),

    #[error("trajectory too short: {len} points, need at least {min}")]
    TooShort { len: usize, min: usize },

    #[error("optimization diverged: {0}")]
    Diverged(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    /// True for failures of the numerical pipeline as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite(_)
                | Error::Quadrature(_)
                | Error::NonFinite(_)
                | Error::Diverged(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
