use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;
use vuldetect_core::codeprep::PrepError;
use vuldetect_core::data::DataError;
use vuldetect_core::distill::DistillError;
use vuldetect_core::metrics::MetricsError;
use vuldetect_core::models::ModelError;
use vuldetect_core::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("checkpoint {field}: {msg}")]
    Checkpoint { field: String, msg: String },
    #[error(transparent)]
    Prep(#[from] PrepError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn checkpoint(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Checkpoint {
            field: field.into(),
            msg: msg.into(),
        }
    }

    /// Whether the caller, not the run, is at fault.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::Usage(_) | Error::Config(_) | Error::Parse { .. } | Error::Prep(_) | Error::Data(_) => true,
            Error::Distill(e) => matches!(
                e,
                DistillError::Config(_) | DistillError::Usage(_) | DistillError::Data(_)
            ),
            Error::Model(e) => matches!(e, ModelError::Config(_)),
            Error::Metrics(_) => true,
            Error::Io { .. } | Error::Checkpoint { .. } | Error::Tensor(_) => false,
        }
    }

    /// Process exit code: 1 for usage errors, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        if self.is_usage() {
            1
        } else {
            2
        }
    }
}
