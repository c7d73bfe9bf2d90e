use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum RepcmError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("region {region} has no {what}")]
    EmptyRegion { region: usize, what: &'static str },

    #[error("{chamber} surface is not closed ({boundary_edges} boundary edges)")]
    OpenSurface {
        chamber: String,
        boundary_edges: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("zero-norm embedding: {0}")]
    ZeroNorm(String),

    #[error("partition hash mismatch: checkpoint was trained against {expected}, got {got}")]
    PartitionHashMismatch { expected: String, got: String },

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: String, reason: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RepcmError>;

impl RepcmError {
    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        RepcmError::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
        }
    }
}
