use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index error: {0}")]
    Index(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("state error: {0}")]
    State(String),

    #[error("empty loss: every position is masked")]
    EmptyLoss,

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("empty item title")]
    EmptyTitle,

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("{0}")]
    Attention(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unknown item id `{0}`")]
    UnknownItem(String),

    #[error("dataset vanishes under k-core (k = {0})")]
    EmptyCore(usize),

    #[error("not a checkpoint")]
    NotACheckpoint,

    #[error("not an embedding table")]
    NotATable,

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated {0}")]
    Truncated(&'static str),

    #[error("shape mismatch for tensor `{name}`: expected {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(
        "stage order violation: {requested} requires a `{expected}` checkpoint but got `{found}` \
         (training order is base -> csft -> mntp -> ic)"
    )]
    StageOrder {
        requested: &'static str,
        expected: String,
        found: String,
    },

    #[error("item `{item}`: {source}")]
    Item {
        item: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
