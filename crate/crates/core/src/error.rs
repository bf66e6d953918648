use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("audio error on {path}: {message}")]
    Audio { path: PathBuf, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite activations in block {block}")]
    NonFinite { block: usize },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("missing prerequisite: {0}")]
    Prerequisite(String),

    #[error("lineage mismatch: {0}")]
    Lineage(String),

    #[error("streaming state error: {0}")]
    Streaming(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable tag, used by the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Manifest { .. } => "manifest",
            Error::Audio { .. } => "audio",
            Error::InvalidInput(_) => "invalid_input",
            Error::Shape(_) => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::Config { .. } => "config",
            Error::Prerequisite(_) => "prerequisite",
            Error::Lineage(_) => "lineage",
            Error::Streaming(_) => "streaming",
            Error::Json(_) => "json",
            Error::Tensor(_) => "tensor",
        }
    }
}
