use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("carrier too small: {0}")]
    CarrierTooSmall(String),
    #[error("insufficient capacity: need {needed} slots, carrier has {available}")]
    Capacity { needed: usize, available: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty request: {0}")]
    EmptyRequest(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("key store error at {path}: {reason}")]
    KeyStore { path: PathBuf, reason: String },
    #[error("invalid identity: {0}")]
    InvalidIdentity(String),
    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),
    #[error("malformed record at line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("jpeg encoding failed: {0}")]
    JpegEncode(String),
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
