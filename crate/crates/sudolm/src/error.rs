//! Crate-wide error type.
//!
//! Errors fall into two families that the CLI maps to exit codes:
//! validation errors (bad arguments, malformed inputs, missing artifacts)
//! exit with 1, runtime/numeric errors exit with 2.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown token {word:?}")]
    UnknownToken { word: String },

    #[error("invalid token id {id} (vocabulary size {size})")]
    InvalidId { id: u32, size: u32 },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("sequence length {len} exceeds context window {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: missing or invalid field {field:?}")]
    Schema { line: usize, field: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint format version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("vocabulary hash mismatch: checkpoint has {expected:#018x}, current vocabulary is {actual:#018x}")]
    VocabHash { expected: u64, actual: u64 },

    #[error("missing artifact: {} (run the upstream stage first)", .0.display())]
    MissingArtifact(PathBuf),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// CLI exit code for this error: 1 for validation, 2 for runtime/numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape { .. } | Error::Numeric(_) | Error::ContextOverflow { .. } => 2,
            _ => 1,
        }
    }
}
