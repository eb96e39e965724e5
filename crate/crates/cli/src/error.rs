use std::path::PathBuf;

use thiserror::Error;
use tsbnet::config::ConfigError;
use tsbnet::data::DataError;
use tsbnet::model::checkpoint::CheckpointError;
use tsbnet::train::TrainError;

/// Process exit codes; success is 0.
pub mod exit {
    pub const USAGE: i32 = 2;
    pub const IO: i32 = 3;
    pub const NUMERICAL: i32 = 4;
    pub const GRADCHECK: i32 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Numerical(String),
    #[error("gradient check failed:\n{0}")]
    GradCheck(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Io { .. } | CliError::Input(_) => exit::IO,
            CliError::Numerical(_) => exit::NUMERICAL,
            CliError::GradCheck(_) => exit::GRADCHECK,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { path, source } => CliError::Io { path, source },
            DataError::Format { .. } | DataError::Record { .. } => CliError::Input(e.to_string()),
            DataError::Invalid(_) => CliError::Usage(e.to_string()),
            DataError::RejectionBudget { .. } | DataError::OutsideCrop { .. } => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(_) | CheckpointError::MalformedHeader { .. } | CheckpointError::Truncated { .. } => {
                CliError::Input(e.to_string())
            }
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            TrainError::Data(d) => d.into(),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Io { path, source } => CliError::Io { path, source },
            TrainError::Model(_) | TrainError::Invalid(_) => CliError::Usage(e.to_string()),
            TrainError::Tensor(_) => CliError::Numerical(e.to_string()),
        }
    }
}
