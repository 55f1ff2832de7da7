use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by any public operation in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {op} got {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("index out of bounds: {0}")]
    IndexOutOfBounds(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("pipeline quality gate failed: {gate} ({detail})")]
    PipelineGate { gate: String, detail: String },

    #[error("ratio search found no admissible grid point for {group}: {detail}")]
    SearchFailure { group: String, detail: String },

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint blob truncated: expected {expected} bytes, got {got}")]
    TruncatedBlob { expected: usize, got: usize },

    #[error("missing artifact for report stage '{0}'")]
    MissingArtifact(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
