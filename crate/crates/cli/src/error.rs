use demandkit::Error;
use thiserror::Error as ThisError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
    Other,
}

#[derive(Debug, ThisError)]
#[error("{message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Config,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Data,
            message: message.into(),
        }
    }

    /// Wraps an engine error with the module it came from.
    pub fn from_core(module: &str, e: Error) -> Self {
        let kind = match &e {
            Error::Config(_) | Error::InvalidParameter(_) | Error::Usage(_) => ErrorKind::Config,
            Error::Numerical(_) | Error::RankDeficient(_) => ErrorKind::Numerical,
            Error::Data(_)
            | Error::Domain(_)
            | Error::Format { .. }
            | Error::Join(_)
            | Error::Dimension { .. }
            | Error::Io(_) => ErrorKind::Data,
        };
        CliError {
            kind,
            message: format!("{module}: {e}"),
        }
    }

    pub fn as_config(mut self) -> Self {
        self.kind = ErrorKind::Config;
        self
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numerical => 4,
            ErrorKind::Other => 1,
        }
    }
}

/// `result.ctx("stage2")` tags an engine error with its module.
pub trait Context<T> {
    fn ctx(self, module: &str) -> CliResult<T>;
}

impl<T> Context<T> for demandkit::Result<T> {
    fn ctx(self, module: &str) -> CliResult<T> {
        self.map_err(|e| CliError::from_core(module, e))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError {
            kind: ErrorKind::Other,
            message: format!("i/o: {e}"),
        }
    }
}
