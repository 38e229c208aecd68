use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("measure has no atoms")]
    EmptySupport,
    #[error("atom {0} appears more than once")]
    DuplicateAtom(usize),
    #[error("weight at index {index} is not positive: {value}")]
    NonpositiveWeight { index: usize, value: f64 },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("negative cost entry {value} at ({row}, {col})")]
    NegativeCost { row: usize, col: usize, value: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("sinkhorn did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("kernel overflow: {0}")]
    OverflowInKernel(String),
    #[error("coupling marginals differ from the reference by {0:e}")]
    MarginalMismatch(f64),

    #[error("N = {n} exceeds the enumeration limit {limit}")]
    TooLargeForEnumeration { n: usize, limit: usize },
    #[error("permanent overflow")]
    Overflow,
    #[error("permanent vanished after scaling")]
    DegeneratePermanent,
    #[error("not a probability distribution: {0}")]
    NotADistribution(String),

    #[error("spectral gap violated: s1 = {0}")]
    SpectralGapViolation(f64),
    #[error("input is not mean zero (mean {0:e})")]
    NotMeanZero(f64),
    #[error("input is not doubly degenerate (residuals {0:e}, {1:e})")]
    NotDegenerate(f64, f64),
    #[error("first-order chaos does not vanish (variance {0:e})")]
    NotDegenerateFirstOrder(f64),
    #[error("batch of size {0} is too small")]
    BatchTooSmall(usize),

    #[error("CLT variance is zero; use the second-order experiment")]
    DegenerateVariance,
    #[error("empty sample")]
    EmptySample,
    #[error("unknown {kind} '{name}'")]
    Unknown { kind: &'static str, name: String },

    #[error("schema violation at {path}: {message}")]
    SchemaViolation { path: String, message: String },
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
