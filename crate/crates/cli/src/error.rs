use std::path::Path;

use ecg_icd::build::BuildError;
use ecg_icd::dataset::DatasetError;
use ecg_icd::eval::EvalError;
use ecg_icd::models::CheckpointError;
use ecg_icd::signal::SignalError;
use ecg_icd::trainer::TrainError;
use thiserror::Error;

/// Command failure. `exit_code` is 1 for invalid data, 2 for I/O and
/// configuration problems.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("cannot access {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("{0}")]
    IoOther(String),
    #[error("{0}")]
    Data(String),
    #[error("checkpoint labels {checkpoint} do not match dataset labels {dataset}")]
    LabelSetMismatch { checkpoint: String, dataset: String },
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io { path: path.display().to_string(), msg: e.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } | CliError::IoOther(_) => 2,
            CliError::Data(_) | CliError::LabelSetMismatch { .. } => 1,
        }
    }
}

fn io_or_data(is_io: bool, msg: String) -> CliError {
    if is_io {
        CliError::IoOther(msg)
    } else {
        CliError::Data(msg)
    }
}

impl From<BuildError> for CliError {
    fn from(e: BuildError) -> Self {
        io_or_data(e.is_io(), e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        let io = matches!(e, DatasetError::Io { .. } | DatasetError::Signal(SignalError::Io { .. }));
        io_or_data(io, e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Dataset(d) => d.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        io_or_data(matches!(e, CheckpointError::Io(_)), format!("checkpoint: {e}"))
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SignalError> for CliError {
    fn from(e: SignalError) -> Self {
        io_or_data(matches!(e, SignalError::Io { .. }), e.to_string())
    }
}
