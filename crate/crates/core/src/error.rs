use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty loss: every target position is ignored")]
    EmptyLoss,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("no adapters installed: {0}")]
    MissingAdapter(String),

    #[error("trainable parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("unknown parameter selector `{0}`")]
    UnknownSelector(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("invalid tokens: {0}")]
    Tokens(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("checksum mismatch: file is corrupt")]
    Checksum,

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("adapter was trained against base {expected}, but the loaded base is {found}")]
    Fingerprint { expected: String, found: String },

    #[error("{0}")]
    Input(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
