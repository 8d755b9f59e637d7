use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = QuestError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum QuestError {
    #[error("invalid cache config: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected} channels, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("page index {index} out of range ({pages} pages)")]
    PageOutOfRange { index: usize, pages: usize },

    #[error("token index {index} out of range ({tokens} tokens)")]
    TokenOutOfRange { index: usize, tokens: usize },

    #[error("cache is empty")]
    EmptyCache,

    #[error("empty page selection")]
    EmptySelection,

    #[error("duplicate page {0} in selection")]
    DuplicatePage(usize),

    #[error("empty input")]
    EmptyInput,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown policy kind `{0}`")]
    UnknownPolicy(String),

    #[error("byte-count instrumentation was not enabled for this step")]
    InstrumentationDisabled,

    #[error("trace format error: {0}")]
    TraceFormat(String),

    #[error("trace truncated: expected {expected} bytes, found {found}")]
    TraceTruncated { expected: u64, found: u64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
