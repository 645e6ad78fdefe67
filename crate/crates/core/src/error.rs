use std::path::PathBuf;

use matrn_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("config {file}:{line}: {msg}")]
    ConfigLine { file: String, line: usize, msg: String },
    #[error("charset: {0}")]
    Charset(String),
    #[error("ingest {file}:{line}: {msg}")]
    Ingest { file: PathBuf, line: usize, msg: String },
    #[error("image {file}: {msg}")]
    Image { file: PathBuf, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("input: {0}")]
    Input(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
