use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = VsdError> = std::result::Result<T, E>;

/// Every failure the library reports. The variants group into families that
/// the command-line harness maps onto distinct exit codes.
#[derive(Debug, Error)]
pub enum VsdError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}")]
    Autodiff(String),

    #[error("non-finite value at coordinate {index}: {context}")]
    NonFinite { index: usize, context: String },

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("attention row {row} is fully masked")]
    FullyMaskedRow { row: usize },

    #[error("unknown token id {id} (vocabulary size {vocab})")]
    UnknownToken { id: usize, vocab: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: field `{field}`: {message}")]
    Schema {
        path: String,
        line: usize,
        field: String,
        message: String,
    },

    #[error("training diverged at epoch {epoch}, batch {batch}: {message}")]
    Divergence {
        epoch: usize,
        batch: usize,
        message: String,
    },

    #[error("configuration hash mismatch: checkpoint has {found}, expected {expected}")]
    HashMismatch { expected: String, found: String },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("{path} already exists (use --force to overwrite)")]
    OutputExists { path: PathBuf },

    #[error("missing experiment: {0}")]
    MissingExperiment(String),

    #[error("incompatible experiments: {0}")]
    Incompatible(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Serde(String),
}

impl VsdError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VsdError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        VsdError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Process exit code for the error family.
    pub fn exit_code(&self) -> i32 {
        match self {
            VsdError::Config(_) => 2,
            VsdError::Io { .. } | VsdError::OutputExists { .. } => 3,
            VsdError::Schema { .. } | VsdError::Serde(_) | VsdError::Checkpoint(_) => 4,
            VsdError::HashMismatch { .. } | VsdError::Incompatible(_) => 5,
            VsdError::MissingExperiment(_) => 6,
            VsdError::Divergence { .. } | VsdError::NonFinite { .. } => 7,
            VsdError::Shape { .. }
            | VsdError::Autodiff(_)
            | VsdError::SequenceTooLong { .. }
            | VsdError::FullyMaskedRow { .. }
            | VsdError::UnknownToken { .. }
            | VsdError::InvalidInput(_) => 8,
        }
    }
}

impl From<serde_json::Error> for VsdError {
    fn from(e: serde_json::Error) -> Self {
        VsdError::Serde(e.to_string())
    }
}
