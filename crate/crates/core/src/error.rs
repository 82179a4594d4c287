use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("average precision is undefined for a class with no positive items")]
    UndefinedAp,
    #[error("cannot stratify: classes with fewer than 2 records: {}", .0.join(", "))]
    Stratification(Vec<String>),
    #[error("incompatible checkpoint or config: {}", .0.join("; "))]
    Compatibility(Vec<String>),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
