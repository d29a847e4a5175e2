use std::path::PathBuf;

use thiserror::Error;

use crate::bpe::TokenId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),

    /// A tokenizer definition failed validation. `entry` names the offending
    /// vocabulary entry, merge or key.
    #[error("invalid tokenizer definition at {entry}: {reason}")]
    Parse { entry: String, reason: String },

    #[error("invalid pre-tokenizer pattern: {0}")]
    Pattern(String),

    #[error("unknown token id {0}")]
    UnknownId(TokenId),

    #[error("byte 0x{byte:02X} at offset {offset} has no token in a non-byte-complete vocabulary")]
    Unencodable { byte: u8, offset: usize },

    #[error("invalid UTF-8 at byte offset {offset}")]
    InvalidUtf8 { offset: usize },

    #[error("embedding file: {0}")]
    Embedding(String),

    #[error("scoring: {0}")]
    Scoring(String),

    #[error("no complete counterpart for token {0} on either side of the ranking")]
    NoCounterpart(TokenId),

    #[error("no stable baseline pair within radius {radius}; tried {attempted:?}")]
    RadiusExhausted {
        radius: usize,
        attempted: Vec<(TokenId, TokenId)>,
    },

    #[error("configuration: {0}")]
    Config(String),

    #[error("decoded alternative tokenization differs from the phrase: {0}")]
    DecodeMismatch(String),

    #[error("condition sets differ: {0}")]
    MismatchedConditions(String),

    #[error("endpoint: {0}")]
    Endpoint(String),
}

impl Error {
    pub(crate) fn parse(entry: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Parse {
            entry: entry.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
