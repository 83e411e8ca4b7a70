use std::path::PathBuf;

use pipenet_core::dataset::DatasetError;
use pipenet_core::eval::EvalError;
use pipenet_core::lfv::LfvError;
use pipenet_core::metrics::MetricsError;
use pipenet_core::model::ModelError;
use pipenet_core::trainer::TrainError;
use thiserror::Error;

/// Process exit codes. Stable across versions.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 3;
    pub const MISSING_ARTIFACT: i32 = 4;
    pub const NUMERICAL: i32 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error at {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("missing artifact {path}: {hint}")]
    Missing { path: PathBuf, hint: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Io { .. } => exit::IO,
            CliError::Missing { .. } => exit::MISSING_ARTIFACT,
            CliError::Numerical(_) => exit::NUMERICAL,
        }
    }

    pub fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { path, source } => CliError::io(path, source),
            DatasetError::DecodeError { path, message } => CliError::Io { path, message },
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(err) => CliError::Io {
                path: PathBuf::new(),
                message: err.to_string(),
            },
            ModelError::Checkpoint(msg) => CliError::Io {
                path: PathBuf::new(),
                message: format!("unreadable checkpoint: {msg}"),
            },
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::DivergenceDetected { .. } => CliError::Numerical(e.to_string()),
            TrainError::Io { path, source } => CliError::io(path, source),
            TrainError::Model(m) => m.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<LfvError> for CliError {
    fn from(e: LfvError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Dataset(d) => d.into(),
            EvalError::Model(m) => m.into(),
            EvalError::Train(t) => t.into(),
            EvalError::Lfv(l) => l.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}
