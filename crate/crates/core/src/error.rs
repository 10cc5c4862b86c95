use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    /// A layer specification that does not chain with its neighbour.
    #[error("incompatible layers {first} -> {second}: {reason}")]
    Incompatible {
        first: usize,
        second: usize,
        reason: String,
    },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: parse error at byte offset {offset}: {reason}")]
    Parse {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("{path}: malformed manifest: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("{path}: blob length mismatch: expected {expected} bytes, found {found}")]
    BlobLength {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("unknown class label {0}")]
    UnknownClass(u32),

    #[error("empty dataset")]
    EmptyDataset,

    #[error(
        "class {class}: no correctly classified images to attribute; \
         train the model further or lower --min-conf"
    )]
    NoQualifyingImages { class: u32 },

    #[error("autodiff: {0}")]
    Tape(String),

    #[error("surgery: {0}")]
    Surgery(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
