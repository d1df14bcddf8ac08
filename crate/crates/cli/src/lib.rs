//! Experiment harness: composes the lab's modules into config-driven runs
//! that write CSV and JSON reports.
//!
//! Each subcommand of the `remem` binary maps to one function in
//! [`commands`]; [`pipeline`] holds the shared steps (data, teacher
//! pretraining and fine-tuning, distillation, probes).

use std::path::{Path, PathBuf};

use thiserror::Error;

pub mod commands;
pub mod config;
pub mod pipeline;

pub use commands::{run_command, Command, RunReport};
pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] remem::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 for configuration problems, 3 for numeric failures, 4 for file
    /// problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(e) if e.is_io() => 4,
            CliError::Core(remem::Error::Parameter(_)) => 2,
            CliError::Io { .. } => 4,
            CliError::Core(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
