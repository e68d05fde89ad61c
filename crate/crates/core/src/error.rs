use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid variant: {0}")]
    InvalidVariant(String),

    #[error("backward: {0}")]
    Tape(String),

    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },

    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("label {label} outside head with {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("checkpoint version {found} unsupported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("backbone fingerprint mismatch: checkpoint {expected:016x}, backbone {found:016x}")]
    Fingerprint { expected: u64, found: u64 },

    #[error("data: {0}")]
    Data(String),

    #[error("frozen tensor `{0}` was modified during training")]
    FrozenMutation(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier used in machine-parsable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::InvalidVariant(_) => "invalid_variant",
            Error::Tape(_) => "tape",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::SequenceTooLong { .. } => "sequence_too_long",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::Format(_) => "format",
            Error::Version { .. } => "version",
            Error::Fingerprint { .. } => "fingerprint",
            Error::Data(_) => "data",
            Error::FrozenMutation(_) => "frozen_mutation",
            Error::Divergence { .. } => "divergence",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
