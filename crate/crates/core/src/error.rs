use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SeaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SeaError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("load error: {0}")]
    Load(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("non-finite loss ({component}) in batch {batch_ids:?}")]
    NonFinite {
        component: String,
        batch_ids: Vec<String>,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl SeaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SeaError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        SeaError::Image {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input or configuration rather than
    /// a runtime failure. The CLI maps these to exit code 2.
    pub fn is_usage(&self) -> bool {
        matches!(self, SeaError::Config(_))
    }
}
