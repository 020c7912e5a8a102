use std::path::PathBuf;

use thiserror::Error;

use crate::data::CodecError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Codec {
        path: PathBuf,
        #[source]
        source: CodecError,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("manifest {path} line {line}: {detail}")]
    Manifest {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("video {video}: {detail}")]
    Video { video: String, detail: String },
    #[error("video {video}: missing modality stream(s) {missing:?}")]
    MissingModalities { video: String, missing: Vec<String> },
    #[error("no teacher loaded; run teacher pretraining first")]
    MissingTeacher,
    #[error("loss: {0}")]
    Loss(String),
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("training: {0}")]
    Train(String),
    #[error("checkpoint block `{block}`: {detail}")]
    Checkpoint { block: String, detail: String },
    #[error("checkpoint config digest mismatch (file {found}, expected {expected})")]
    DigestMismatch { found: String, expected: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
