//! Crate-wide error type.

/// Errors surfaced by graph construction, training, data loading and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at {node}: {detail}")]
    ShapeMismatch { node: String, detail: String },

    #[error("non-finite value produced at {node}")]
    NonFinite { node: String },

    #[error("leaf '{0}' is not bound")]
    UnboundLeaf(String),

    #[error("graph output must be a scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("zero-norm vector at {node}: l2-normalize undefined")]
    ZeroNorm { node: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("knowledge variant mismatch: expected {expected}, got {got}")]
    VariantMismatch { expected: String, got: String },

    #[error("replay knowledge requires a memory buffer")]
    MissingBuffer,

    #[error("memory buffer is empty")]
    EmptyMemory,

    #[error("empty data set: {0}")]
    EmptyData(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("config key '{key}': {msg}")]
    Config { key: String, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
