//! Experiment driver behind the `ctg` binary.

pub mod commands;
pub mod experiment;
pub mod report;

use ctg_core::CtgError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] CtgError),
}

impl CliError {
    /// 1 usage or configuration, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(CtgError::Config(_)) => 1,
            CliError::Core(CtgError::Numeric(_) | CtgError::Autodiff(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}
