use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid character {ch:?} at position {pos}")]
    InvalidCharacter { ch: char, pos: usize },
    #[error("word {0:?} is not in the lexicon")]
    OovWord(String),
    #[error("lexicon line {line}: {msg}")]
    BadLexicon { line: usize, msg: String },

    #[error("malformed tree at offset {offset}: {msg}")]
    MalformedTree { offset: usize, msg: String },
    #[error("tree leaves and tokens diverge at word {index}: {leaf:?} != {token:?}")]
    TokenizationMismatch { index: usize, leaf: String, token: String },

    #[error("embedding dimension mismatch on line {0}")]
    DimensionMismatch(usize),
    #[error("embedding table is empty")]
    EmptyTable,

    #[error("alignment error: expected {expected} word rows, got {got}")]
    AlignmentError { expected: usize, got: usize },
    #[error("corrupt feature file: {0}")]
    CorruptFile(String),
    #[error("non-finite value at index {0}")]
    NonFiniteValue(usize),

    #[error("invalid mel band: {0}")]
    InvalidBand(String),
    #[error("clip too short: {len} samples, need at least {min}")]
    TooShort { len: usize, min: usize },
    #[error("unsupported audio: {0}")]
    BadAudio(String),

    #[error("index {index} out of range for inventory of {size}")]
    IndexError { index: usize, size: usize },
    #[error("configuration error: {0}")]
    ConfigError(String),
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("numerical error: {0}")]
    NumericalError(String),

    #[error("missing input {}: {reason}", path.display())]
    MissingInput { path: PathBuf, reason: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable short code used for the `ERROR[<code>]` prefix on the command line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidCharacter { .. } => "invalid-character",
            Error::OovWord(_) => "oov-word",
            Error::BadLexicon { .. } => "bad-lexicon",
            Error::MalformedTree { .. } => "malformed-tree",
            Error::TokenizationMismatch { .. } => "tokenization-mismatch",
            Error::DimensionMismatch(_) => "dimension-mismatch",
            Error::EmptyTable => "empty-table",
            Error::AlignmentError { .. } => "alignment",
            Error::CorruptFile(_) => "corrupt-file",
            Error::NonFiniteValue(_) => "non-finite",
            Error::InvalidBand(_) => "invalid-band",
            Error::TooShort { .. } => "too-short",
            Error::BadAudio(_) => "bad-audio",
            Error::IndexError { .. } => "index",
            Error::ConfigError(_) => "config",
            Error::ShapeError(_) => "shape",
            Error::NumericalError(_) => "numerical",
            Error::MissingInput { .. } => "missing-input",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
