use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An operation was called in the wrong lifecycle state, e.g. backward before forward.
    #[error("state error: {0}")]
    State(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("failed to decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("codec error: {0}")]
    Codec(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bundle has bad magic bytes")]
    BadMagic,

    #[error("unsupported bundle format version {0}")]
    UnsupportedVersion(u32),

    #[error("bundle truncated: {0}")]
    Truncated(String),

    #[error("bundle digest mismatch: stored {stored}, computed {computed}")]
    DigestMismatch { stored: String, computed: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("phase {phase} requires artifacts from phase {missing}")]
    Dependency { phase: String, missing: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end: 1 usage, 2 data, 3 compute.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Dependency { .. } => 1,
            Error::Decode { .. }
            | Error::Io { .. }
            | Error::BadMagic
            | Error::UnsupportedVersion(_)
            | Error::Truncated(_)
            | Error::DigestMismatch { .. }
            | Error::Manifest(_)
            | Error::Json(_) => 2,
            Error::Shape(_)
            | Error::State(_)
            | Error::Contract(_)
            | Error::Codec(_)
            | Error::NonFiniteLoss { .. } => 3,
        }
    }
}
