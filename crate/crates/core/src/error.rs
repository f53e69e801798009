use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vector has zero norm")]
    ZeroNormVector,
    #[error("vector is empty or contains non-finite values")]
    InvalidVector,
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("embedder failure: {0}")]
    EmbedderFailure(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("eigen-solver did not converge after {iterations} iterations (subspace change {residual:e})")]
    ConvergenceFailure { iterations: usize, residual: f64 },
    #[error("malformed template: {0}")]
    MalformedTemplate(String),
    #[error("surrogate unavailable: {0}")]
    SurrogateUnavailable(String),
    #[error("unparseable surrogate response for seed {seed_id} after {attempts} attempts")]
    UnparseableResponse { seed_id: String, attempts: usize },
    #[error("need at least two seeds, got {0}")]
    InsufficientSeeds(usize),
    #[error("invalid refusal set: {0}")]
    InvalidRefusalSet(String),
    #[error("threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("empty text")]
    EmptyText,
    #[error("store is full ({0} records)")]
    StoreFull(usize),
    #[error("upstream timed out")]
    UpstreamTimeout,
    #[error("upstream failure: {0}")]
    UpstreamFailure(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid stage plan: {0}")]
    InvalidPlan(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("checksum error in section {section}: {detail}")]
    Checksum { section: String, detail: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
