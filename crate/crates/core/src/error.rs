use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("antipodal rotation: flower axis points along -z")]
    Antipodal,
    #[error("non-positive ray depth {0}")]
    NonPositiveDepth(f64),
    #[error("covariance is not symmetric positive definite")]
    SingularCovariance,
    #[error("invalid rotation matrix: {0}")]
    InvalidRotation(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invariant violated for flower {id}: {message}")]
    InvariantViolation { id: u32, message: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid counts: {0}")]
    InvalidCounts(String),
    #[error("run contains no data")]
    EmptyRun,
    #[error("calibration of {parameter} did not converge after {iterations} iterations")]
    NoConvergence { parameter: &'static str, iterations: usize },
    #[error("schema mismatch in {file} at row {row}: {message}")]
    SchemaMismatch { file: String, row: usize, message: String },
    #[error("config error in field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("target track {0} lost")]
    TargetLost(u32),
    #[error("runtime invariant violated: {0}")]
    Runtime(String),
    #[error("scene generation failed: {0}")]
    SceneGeneration(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn from_json(e: serde_json::Error) -> Self {
        Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}
