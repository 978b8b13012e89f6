use std::path::PathBuf;

use thiserror::Error;

/// Failures of a subcommand, each tied to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact(_) => 3,
            CliError::Numeric(_) | CliError::Other(_) => 1,
        }
    }
}

impl From<iflab::Error> for CliError {
    fn from(e: iflab::Error) -> Self {
        use iflab::Error as E;
        match e {
            E::BadConfig(msg) => CliError::Config(msg),
            E::NonFinite { .. } | E::Diverged { .. } | E::IndefiniteDetected { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}
