use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("step index {index} out of range for grid with {steps} steps")]
    StepOutOfRange { index: usize, steps: usize },
    #[error("invalid refinement count: M must be >= 1")]
    InvalidRefinement,
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("unknown condition label `{0}`")]
    UnknownCondition(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("degenerate noise level: {0}")]
    DegenerateNoise(String),
    #[error("missing solver history at step {0}")]
    MissingHistory(usize),
    #[error("step record field `{field}` not populated at step {step}")]
    UnpopulatedRecord { field: &'static str, step: usize },
    #[error("{0}")]
    Unsupported(String),
    #[error("coefficient table mismatch: {0}")]
    TableMismatch(String),
    #[error("coefficient table version {found} unsupported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("malformed coefficient table: {0}")]
    TableParse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
