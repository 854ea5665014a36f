use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bit index {index} out of range for a {width}-bit pattern")]
    BitIndex { index: u32, width: u32 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid fault spec: {0}")]
    InvalidFault(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("matrix file: {0}")]
    MatrixFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
