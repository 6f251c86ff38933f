use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("resource not found: {0}")]
    Missing(String),

    #[error("malformed {what}: {message}")]
    Format { what: String, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("insufficient documents: {0}")]
    InsufficientData(String),

    #[error("batch has no masked positions")]
    NoMaskedPositions,

    #[error("missing {label} label on {count} document(s)")]
    MissingLabel { label: String, count: usize },

    #[error("token id {id} out of vocabulary (size {vocab_size})")]
    OutOfVocabulary { id: usize, vocab_size: usize },

    #[error("label cardinality mismatch: task expects {expected} classes, found {found}")]
    LabelCardinality { expected: usize, found: usize },

    #[error("subset `{0}` selects no documents")]
    EmptySubset(String),

    #[error("unknown {group} category `{value}`")]
    UnknownCategory { group: String, value: String },

    #[error("digest mismatch: {0}")]
    DigestMismatch(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(what: impl Into<String>, message: impl ToString) -> Self {
        Error::Format { what: what.into(), message: message.to_string() }
    }

    /// Stable machine-readable code, used in CLI error JSON and by the C ABI.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "IO_ERROR",
            Error::Missing(_) => "RESOURCE_MISSING",
            Error::Format { .. } => "MALFORMED_INPUT",
            Error::InvalidArgument(_) => "INVALID_ARGUMENT",
            Error::NonFinite(_) => "NON_FINITE",
            Error::InsufficientData(_) => "INSUFFICIENT_DATA",
            Error::NoMaskedPositions => "NO_MASKED_POSITIONS",
            Error::MissingLabel { .. } => "MISSING_LABEL",
            Error::OutOfVocabulary { .. } => "OUT_OF_VOCABULARY",
            Error::LabelCardinality { .. } => "LABEL_CARDINALITY",
            Error::EmptySubset(_) => "EMPTY_SUBSET",
            Error::UnknownCategory { .. } => "UNKNOWN_CATEGORY",
            Error::DigestMismatch(_) => "DIGEST_MISMATCH",
        }
    }

    /// Process exit code: 4 when an input resource is missing, 3 for every
    /// other contract violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 4,
            Error::Missing(_) => 4,
            _ => 3,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::format("json", e)
    }
}
