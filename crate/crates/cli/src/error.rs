use thiserror::Error;

/// Failures of a command, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config or input files. Exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Something broke while running. Exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

pub fn runtime<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Runtime(msg.into()))
}

pub fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}
