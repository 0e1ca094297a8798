use std::path::PathBuf;

/// Errors produced anywhere in the restoration pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("cannot broadcast {lhs:?} with {rhs:?} (only leading-1 broadcasting is supported)")]
    Broadcast { lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown token {word:?} in prompt {prompt:?}")]
    UnknownToken { word: String, prompt: String },

    #[error("prompt {prompt:?} has {len} tokens, more than the maximum {max}")]
    PromptTooLong {
        prompt: String,
        len: usize,
        max: usize,
    },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("unknown adapter site {0:?}")]
    UnknownSite(String),

    #[error("rank {rank} exceeds min(d, k) = {limit} at site {site}")]
    RankTooLarge {
        site: String,
        rank: usize,
        limit: usize,
    },

    #[error("dimension mismatch for {name}: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),

    #[error("corrupt file at byte offset {offset}: {reason}")]
    CorruptFile { offset: u64, reason: String },

    #[error("unsupported {kind} version {found} (expected {expected})")]
    VersionMismatch {
        kind: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
