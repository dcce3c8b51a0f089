use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("duplicate uid {uid} in frames '{first_frame}' and '{second_frame}'")]
    DuplicateUid {
        uid: u64,
        first_frame: String,
        second_frame: String,
    },
    #[error("frame '{frame_id}', uid {uid}: {message}")]
    InvalidObject {
        frame_id: String,
        uid: u64,
        message: String,
    },
    #[error("parse error in {context} at line {line}, column {column}: {message}")]
    Parse {
        context: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing shift mode ({dx}, {dy})")]
    MissingMode { dx: i32, dy: i32 },
    #[error("shift mode ({dx}, {dy}) failed: {source}")]
    ModeFailed {
        dx: i32,
        dy: i32,
        #[source]
        source: Box<Error>,
    },
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("empty input: {0}")]
    Empty(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, err: &serde_json::Error) -> Self {
        Error::Parse {
            context: context.into(),
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }
}
