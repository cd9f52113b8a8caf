use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("label {label} out of range for {n_classes} classes")]
    InvalidLabel { label: usize, n_classes: usize },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid edge ({a}, {b}): {reason}")]
    InvalidEdge { a: usize, b: usize, reason: &'static str },

    #[error("skeleton graph is disconnected: joint {0} is unreachable from joint 0")]
    DisconnectedGraph(usize),

    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),

    #[error("line {line}: expected {expected}")]
    Parse { line: usize, expected: String },

    #[error("file truncated at line {line}: expected {expected}")]
    TruncatedFile { line: usize, expected: String },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("sequence has no frames")]
    EmptySequence,

    #[error("block index {index} out of range ({n_blocks} blocks)")]
    InvalidBlock { index: usize, n_blocks: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("loss diverged at epoch {epoch}, batch {batch}: {value}")]
    DivergedLoss { epoch: usize, batch: usize, value: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}
