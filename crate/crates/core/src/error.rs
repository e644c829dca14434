use thiserror::Error;

/// Errors produced by the estimator and its tooling.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("point is behind the camera or too close (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("unknown clone id {0}")]
    UnknownClone(u64),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid time step {0} s")]
    InvalidDt(f64),
    #[error("landmark {0} has an insufficient track")]
    InsufficientTrack(u64),
    #[error("observation rays have too little parallax ({0:.4} rad)")]
    LowParallax(f64),
    #[error("ill-conditioned system (condition number {0:e})")]
    IllConditioned(f64),
    #[error("residual model is empty")]
    EmptyModel,
    #[error("landmark {0} has a singular Hessian block")]
    SingularLandmarkBlock(u64),
    #[error("innovation matrix is not invertible")]
    InnovationNotInvertible,
    #[error("timestamp {t} is not after {previous}")]
    NonMonotonicTime { previous: f64, t: f64 },
    #[error("singular system in reference solver")]
    SingularSystem,
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("fewer than 3 associated poses ({0})")]
    InsufficientOverlap(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("filter has not been initialized")]
    NotInitialized,
    #[error("non-finite input sample")]
    NonFiniteInput,
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
