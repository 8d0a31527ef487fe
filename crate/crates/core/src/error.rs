use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not Schur stable (spectral radius {0:.6})")]
    NotStable(f64),
    #[error("index {index} out of range 1..={max}")]
    IndexOutOfRange { index: usize, max: usize },
    #[error("conditioning window of {window} steps after {observed} observed steps exceeds the {steps} available")]
    WindowExceedsHorizon {
        observed: usize,
        window: usize,
        steps: usize,
    },
    #[error("invalid probability {0}")]
    InvalidProbability(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("tightening schedule is empty")]
    EmptySchedule,
    #[error("tightened constraint set is empty")]
    EmptyResult,
    #[error("ellipsoid centers differ by {0:e}")]
    CenterMismatch(f64),
    #[error("QP solver hit the iteration limit ({0})")]
    MaxIterations(usize),
    #[error("optimization problem is infeasible at step {0}")]
    Infeasible(usize),
    #[error("terminal assumption violated: {0}")]
    AssumptionViolated(String),
    #[error("discretized model is unstable (spectral radius {0:.6})")]
    UnstableDiscretization(f64),
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn dims(msg: impl Into<String>) -> Error {
    Error::DimensionMismatch(msg.into())
}
