use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A coarse token had no lexicon entry during expansion.
    #[error("lexicon has no entry for coarse token `{0}`")]
    LexiconMiss(String),

    #[error("index {index} out of range for {space} inventory of size {size}")]
    IndexOutOfRange {
        space: &'static str,
        index: usize,
        size: usize,
    },

    #[error("unknown {space} token `{token}`")]
    UnknownToken { space: &'static str, token: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    Numerics(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A frame-level id sequence contained only blanks; callers substitute the
    /// reserved silence token.
    #[error("frame sequence is all blank")]
    AllBlank,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training loss went non-finite; the last good checkpoint is retained.
    #[error("training diverged: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
