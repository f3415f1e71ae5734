use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input: arguments, configuration files, specs.
    #[error("{0}")]
    Validation(String),
    /// Failure while doing the work.
    #[error("{0}")]
    Runtime(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// Process exit code: 1 for validation errors, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            _ => 2,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<cemoe_core::Error> for CliError {
    fn from(e: cemoe_core::Error) -> Self {
        match e {
            cemoe_core::Error::Config(_) => CliError::Validation(e.to_string()),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(format!("json: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(format!("csv: {e}"))
    }
}
