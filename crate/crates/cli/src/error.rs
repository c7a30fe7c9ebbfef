use phnn::io::IoError;
use phnn::ode::SimError;
use phnn::train::TrainError;
use phnn::transfer::TransferError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::NonFinite { .. } | SimError::Diverged { .. } => CliError::Numerical(e.to_string()),
            SimError::Invalid(_) | SimError::Model(_) => CliError::Validation(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } | TrainError::Optimizer { .. } => CliError::Numerical(e.to_string()),
            TrainError::Sim(s) => s.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<TransferError> for CliError {
    fn from(e: TransferError) -> Self {
        match e {
            TransferError::Sim(s) => s.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}
