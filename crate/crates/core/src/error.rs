use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed config: {0}")]
    ConfigParse(String),

    /// A configuration value violates an invariant; the message names the key.
    #[error("{0}")]
    ConfigInvalid(String),

    #[error("unknown {axis} label {label:?}; valid labels: {valid}")]
    UnknownLabel {
        axis: &'static str,
        label: String,
        valid: String,
    },

    #[error("invalid attribute schema: {0}")]
    Schema(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}, line {line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("empty manifest: {0}")]
    EmptyManifest(PathBuf),

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint checksum mismatch (archive corrupted)")]
    Checksum,

    #[error("non-finite {component} at step {step}")]
    NonFinite { component: String, step: u64 },

    #[error("evaluation: {0}")]
    Evaluation(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
