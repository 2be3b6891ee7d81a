use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // tokenizer
    #[error("sequence of {len} tokens exceeds context length {context_length}")]
    OverLength { len: usize, context_length: usize },
    #[error("symbol {symbol:?} is not representable in the vocabulary")]
    UnknownSymbol { symbol: String },
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("span {0:?} does not resolve to any content token")]
    SpanNotFound(String),
    #[error("span {text:?} occurs {count} times; give a byte range instead")]
    AmbiguousSpan { text: String, count: usize },
    #[error("span entries {first} and {second} overlap")]
    OverlapError { first: usize, second: usize },
    #[error("invalid weight {value} for {what}")]
    InvalidWeight { what: String, value: f64 },

    // encoder
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("all unmasked attention weights are zero in row {row}")]
    DegenerateRow { row: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    // trainer
    #[error("class {0:?} has no prompts")]
    EmptyClass(String),
    #[error("label {label} does not refer to a known class (have {classes})")]
    UnknownLabel { label: usize, classes: usize },

    // model io
    #[error("missing tensors: {}", .0.join(", "))]
    MissingTensor(Vec<String>),
    #[error("tensor {name:?} has unsupported dtype {dtype}")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("container: {0}")]
    Container(String),
    #[error("model has no tensors")]
    EmptyModel,

    // embedding store
    #[error("{embeddings} embeddings but {metadata} metadata records")]
    CountMismatch { embeddings: usize, metadata: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("unknown attribute {0:?}")]
    UnknownAttribute(String),
    #[error("category {0:?} is empty")]
    EmptyCategory(String),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("metadata line {line}: {message}")]
    Metadata { line: usize, message: String },

    // metrics
    #[error("no positive items")]
    NoPositives,
    #[error("k = {k} is outside 1..={n}")]
    BadK { k: usize, n: usize },
    #[error("partition does not cover the ranked items: {0}")]
    PartitionMismatch(String),
    #[error("labels contain a single class")]
    SingleClass,
    #[error("empty weight grid")]
    EmptyGrid,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Errors caused by user input rather than by a fault in the toolkit.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::NonFinite(_))
    }
}
