use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty prompt")]
    EmptyPrompt,

    #[error("token {token} out of range for vocabulary of size {vocab_size}")]
    InvalidToken { token: u32, vocab_size: usize },

    #[error("invalid draft round: {0}")]
    InvalidRound(String),

    #[error("cache mismatch: {0}")]
    CacheMismatch(String),

    #[error("sequence overflow: position {position} exceeds max_seq_len {max_seq_len}")]
    SequenceOverflow { position: usize, max_seq_len: usize },

    #[error("cannot roll back to position {requested}: cache holds only {position} tokens")]
    RollbackBeyond { requested: usize, position: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid controller state: {0}")]
    InvalidState(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("bad magic bytes: expected NLM1")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("tensor `{name}` shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("labels contain a single class; need both positive and negative examples")]
    SingleClassLabels,

    #[error("no drafted tokens in trace")]
    NoDraftedTokens,

    #[error("invalid metric input: {0}")]
    InvalidMetric(String),

    #[error("invalid theta schedule: {0}")]
    InvalidSchedule(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
