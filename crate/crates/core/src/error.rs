use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("duplicate item id {0:?}")]
    DuplicateId(String),

    #[error("token id {id} is outside the vocabulary of size {vocab_size}")]
    OutOfVocab { id: u32, vocab_size: usize },

    #[error("empty sequence: {0}")]
    Empty(&'static str),

    #[error("invalid log-probability {value}: {reason}")]
    InvalidLogProb { value: f64, reason: &'static str },

    #[error("non-finite loss in instance {index} (item {item_id}): {detail}")]
    NonFiniteLoss {
        index: usize,
        item_id: String,
        detail: String,
    },

    #[error("context of {len} tokens exceeds the model window of {window}")]
    ContextOverflow { len: usize, window: usize },

    #[error("context has no passages but the operation requires them")]
    MissingPassages,

    #[error("cannot expand a finished beam")]
    FinishedBeam,

    #[error("sample tree has no selectable path")]
    EmptyTree,

    #[error("no viable continuation at the first step")]
    NoViableContinuation,

    #[error("answers reference ids missing from the corpus: {0:?}")]
    UnknownIds(Vec<String>),

    #[error("unknown item id {0:?}")]
    UnknownItem(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed table: {0}")]
    Table(String),

    #[error("judge failure: {0}")]
    Judge(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
