use std::process::ExitCode;

use fedgat::error::Error;
use thiserror::Error as ThisError;

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Process exit codes, one per failure class.
pub mod code {
    pub const OK: u8 = 0;
    pub const INTERNAL: u8 = 1;
    /// Also what clap uses for malformed arguments.
    pub const CONFIG: u8 = 2;
    pub const IO: u8 = 3;
    pub const NUMERIC: u8 = 4;
    pub const PROTOCOL: u8 = 5;
    pub const VERIFY_FAILED: u8 = 6;
    pub const PARTIAL: u8 = 7;
}

#[derive(Clone, Debug, ThisError)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("verification failed: {0}")]
    Verify(String),
    #[error("{failed} of {total} sweep cells failed")]
    Partial { failed: usize, total: usize },
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => code::CONFIG,
            CliError::Io(_) => code::IO,
            CliError::Numeric(_) => code::NUMERIC,
            CliError::Protocol(_) => code::PROTOCOL,
            CliError::Verify(_) => code::VERIFY_FAILED,
            CliError::Partial { .. } => code::PARTIAL,
            CliError::Internal(_) => code::INTERNAL,
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code())
    }

    pub(crate) fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Invalid(_) => CliError::Config(msg),
            Error::Io { .. } | Error::Parse { .. } | Error::Json(_) => CliError::Io(msg),
            Error::NonFinite { .. } | Error::Numeric(_) => CliError::Numeric(msg),
            Error::Protocol(_) => CliError::Protocol(msg),
            Error::Shape { .. } => CliError::Internal(msg),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
