use thiserror::Error;

/// Errors produced by kernel construction, transform learning and prediction.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid kernel parameter: {0}")]
    InvalidKernelParam(String),

    #[error("Gegenbauer weight parameter must exceed -1/2, got {0}")]
    InvalidWeightParam(f64),

    #[error("argument outside domain: {0}")]
    Domain(String),

    #[error("invalid coefficients: {0}")]
    InvalidCoefficients(String),

    #[error("degree {0} exceeds the supported maximum of {max}", max = crate::basis::MAX_DEGREE)]
    DegreeTooLarge(usize),

    #[error("degenerate objective: {0}")]
    DegenerateObjective(String),

    #[error("kernel matrix could not be factorized even with jitter {jitter:e}")]
    IllConditionedKernel { jitter: f64 },

    #[error("log-barrier argument {0:e} is not positive")]
    BarrierViolation(f64),

    #[error("optimization failed: {0}")]
    OptimizationFailure(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("division by zero: {0}")]
    DivisionByZero(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
