use std::path::{Path, PathBuf};

use step_core::data::DataError;
use step_core::metrics::MetricError;
use step_core::tracker::TrackError;
use step_core::train::TrainError;
use step_core::TensorError;

/// Failures of the command-line pipeline, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad arguments or configuration (exit 2).
    #[error("{0}")]
    Usage(String),
    /// Unreadable or unwritable file (exit 3).
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    /// Undecodable image (exit 3).
    #[error("{}: {source}", path.display())]
    Image { path: PathBuf, source: image::ImageError },
    /// Malformed input file (exit 3).
    #[error("{}: {msg}", path.display())]
    Parse { path: PathBuf, msg: String },
    /// Training produced a non-finite loss or gradient (exit 4).
    #[error("training aborted: {0}")]
    NonFinite(TrainError),
    /// Checkpoint incompatible with the requested configuration (exit 5).
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
    /// Predictions that do not fit the evaluation schema (exit 6).
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(TrainError),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Track(TrackError::InvalidBox(..)) => 2,
            Error::Track(TrackError::BoxCount { .. } | TrackError::KeypointCount { .. } | TrackError::Policy(_)) => 2,
            Error::Io { .. } | Error::Image { .. } | Error::Parse { .. } => 3,
            Error::NonFinite(_) => 4,
            Error::Mismatch(_) => 5,
            Error::Schema(_) => 6,
            _ => 1,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    pub fn parse(path: &Path, msg: impl Into<String>) -> Self {
        Error::Parse { path: path.to_path_buf(), msg: msg.into() }
    }
}

impl From<TrainError> for Error {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite(_) | TrainError::NonFiniteGradient(_) => Error::NonFinite(e),
            TrainError::Config(m) => Error::Usage(m.to_string()),
            other => Error::Train(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
