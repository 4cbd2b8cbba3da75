use std::path::PathBuf;

/// Errors raised anywhere in the layer-separation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("render error: {0}")]
    Render(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("non-finite value in {term}")]
    NonFinite { term: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
