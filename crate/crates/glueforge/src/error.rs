//! Error type shared across the toolkit.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, GlueError>;

#[derive(Debug, thiserror::Error)]
pub enum GlueError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed checkpoint: {0}")]
    Format(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("incompatible models: {0}")]
    Incompatible(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("zero-norm tensor {tensor} in model {model}")]
    ZeroNorm { model: String, tensor: String },

    #[error("evaluation failed: {0}")]
    Eval(String),

    #[error("non-finite objective value at trial {trial}: {detail}")]
    NonFinite { trial: usize, detail: String },

    #[error("pipeline stage {stage} failed on cluster {cluster}: {source}")]
    Stage {
        stage: String,
        cluster: usize,
        #[source]
        source: Box<GlueError>,
    },
}

impl GlueError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GlueError::Io {
            path: path.into(),
            source,
        }
    }
}
