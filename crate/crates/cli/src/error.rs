use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, configuration or input files. Exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Failure during computation or while writing outputs. Exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<decompnet::Error> for CliError {
    fn from(e: decompnet::Error) -> Self {
        if e.is_usage() {
            CliError::Usage(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

/// Failures writing outputs are runtime errors.
pub fn write_err(path: &std::path::Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("writing {}: {e}", path.display()))
}
