use std::path::PathBuf;

/// Errors raised across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("context text is empty")]
    EmptyText,
    #[error("unknown context {0:?} (not in imported table)")]
    UnknownContext(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate key {0:?}")]
    DuplicateKey(String),
    #[error("bad magic in {0}")]
    BadMagic(PathBuf),
    #[error("unsupported store version {0}")]
    VersionUnsupported(u32),
    #[error("truncated file: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: u64, found: u64 },
    #[error("row {row} out of bounds (store has {count} rows)")]
    RowOutOfBounds { row: u32, count: u32 },
    #[error("context distance {distance} exceeds maximum {max}")]
    DistanceOutOfRange { distance: usize, max: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unknown tag {0:?}")]
    UnknownTag(String),
    #[error("pairs for document {0:?} are not sorted by start time")]
    UnsortedInput(String),
    #[error("held-out lists overlap on key {0:?}")]
    OverlappingHeldoutLists(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("checkpoint tensor {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
