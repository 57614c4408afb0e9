//! Command implementations behind the `braincl` binary: dataset synthesis,
//! sequence runs and cross-run reports, all driven by one experiment file.

pub mod commands;
pub mod experiment;
pub mod report;

pub use commands::{cmd_run, cmd_synth, RunSummary, SynthSummary};
pub use experiment::{Experiment, ExperimentFile, RunOverrides, StrategyChoice};
pub use report::{cmd_report, Report, RunRecord};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad input; the message starts with the offending field path.
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Core(braincl::Error),
    #[error("{0}")]
    Runtime(String),
}

impl From<braincl::Error> for CliError {
    fn from(e: braincl::Error) -> Self {
        match e {
            braincl::Error::Validation(msg) => CliError::Validation(msg),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    /// 2 for validation failures, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            _ => 1,
        }
    }
}
