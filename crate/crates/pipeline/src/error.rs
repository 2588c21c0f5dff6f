use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{endpoint}: request failed after {attempts} attempt(s): {message}")]
    Transport {
        endpoint: String,
        attempts: u32,
        message: String,
    },

    #[error("{endpoint}: HTTP {status}: {body}")]
    Status {
        endpoint: String,
        status: u16,
        body: String,
    },

    #[error("{endpoint}: malformed response: {message}")]
    MalformedResponse { endpoint: String, message: String },

    #[error("{endpoint}: embedding dimension mismatch (expected {expected}, got {actual})")]
    DimensionMismatch {
        endpoint: String,
        expected: usize,
        actual: usize,
    },

    #[error("unparseable judge reply: {raw:?}")]
    Parse { raw: String },

    #[error("{0} must not be empty")]
    EmptyField(&'static str),

    #[error("knowledge base is empty")]
    EmptyKnowledgeBase,

    #[error("knowledge base: {0}")]
    KnowledgeBase(String),

    #[error("prompt template: {0}")]
    Template(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("all {n} judges failed: {summary}")]
    AllJudgesFailed { n: usize, summary: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Core(#[from] ral2m_core::Error),
}

impl PipelineError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;
