use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("rank-deficient regressor matrix (estimated rank {rank} of {cols})")]
    RankDeficient { rank: usize, cols: usize },

    #[error("singular residual covariance")]
    SingularCovariance,

    /// The target spectrum has a negative eigenvalue on the unit circle.
    #[error("spectrum is not positive semidefinite: min eigenvalue {min_eigenvalue:e} at angle {angle}")]
    NotPsd { min_eigenvalue: f64, angle: f64 },

    #[error("inconsistent MA orders: {0}")]
    InconsistentOrders(String),

    #[error("zero reference spectrum at angle {angle}")]
    ZeroDenominator { angle: f64 },

    #[error("zero spectrum")]
    ZeroSpectrum,

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
