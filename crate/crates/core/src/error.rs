use std::path::PathBuf;

use crate::backends::Role;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("subject not found: {0}")]
    SubjectNotFound(String),

    #[error("{role} backend failed after {attempts} attempt(s): {message}")]
    Backend { role: Role, attempts: u32, message: String },

    #[error("{role} backend timed out after {attempts} attempt(s)")]
    Timeout { role: Role, attempts: u32 },

    #[error("{role} protocol error: {message}")]
    Protocol { role: Role, message: String },

    #[error("{role} returned an empty response")]
    EmptyResponse { role: Role },

    #[error("no {role} fixture for request {key}")]
    MissingFixture { role: Role, key: String },

    #[error("cosine similarity undefined for a zero vector")]
    UndefinedCosine,

    #[error("graph has no triplets to score")]
    EmptyGraph,

    #[error("cannot calibrate mean prediction length: every graph is empty")]
    CannotCalibrate,

    #[error("{image_id}: {path}: {message}")]
    Annotation {
        image_id: String,
        path: String,
        message: String,
    },

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

    #[error("image error: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn protocol(role: Role, msg: impl Into<String>) -> Self {
        Error::Protocol {
            role,
            message: msg.into(),
        }
    }

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

    /// Coarse classification used by front ends to pick an exit status.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Backend { .. }
            | Error::Timeout { .. }
            | Error::Protocol { .. }
            | Error::EmptyResponse { .. }
            | Error::MissingFixture { .. } => ErrorKind::Backend,
            Error::Io { .. } => ErrorKind::Io,
            _ => ErrorKind::Validation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Backend,
    Io,
}
