use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("backward needs a scalar loss of shape [1], got {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value while probing {param}[{index}]")]
    NonFinite { param: String, index: usize },

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("unknown token id {0}")]
    UnknownId(usize),

    #[error("unknown token {0:?} in meta-word embedding table")]
    UnknownMetaToken(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("meta-word variable {key}: {msg}")]
    MetaWord { key: String, msg: String },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn metaword(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::MetaWord {
            key: key.into(),
            msg: msg.into(),
        }
    }
}
