use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("plugin failed on chunk {chunk_id}: {message}")]
    Plugin { chunk_id: String, message: String },

    #[error("trace for chunk {0} is inactive")]
    InactiveTrace(String),

    #[error("cannot form {k} clusters from {n} points")]
    InsufficientPoints { k: usize, n: usize },

    #[error("unparseable model reply: {reason}")]
    LlmFormat { reason: String, raw: String },

    #[error("completion client error: {0}")]
    Client(String),

    #[error("dialogue aborted after {} turns: {reason}", partial.len())]
    DialogueAborted {
        reason: String,
        partial: Vec<crate::instruct::Turn>,
    },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn llm_format(reason: impl Into<String>, raw: impl Into<String>) -> Self {
        Error::LlmFormat {
            reason: reason.into(),
            raw: raw.into(),
        }
    }

    /// Process exit code for the command-line front end.
    ///
    /// 1 = validation or configuration, 2 = I/O, 3 = upstream completion client.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Image(_) => 2,
            Error::Client(_) | Error::LlmFormat { .. } | Error::DialogueAborted { .. } => 3,
            _ => 1,
        }
    }
}
