use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const FORMAT: i32 = 3;
    pub const CAPPED: i32 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("format: {0}")]
    Format(String),
    #[error("{0} pixel(s) reached sigma_cap without meeting the threshold")]
    Capped(usize),
    #[error(transparent)]
    Core(tempres_core::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Format(_) => exit::FORMAT,
            CliError::Capped(_) => exit::CAPPED,
            CliError::Core(_) | CliError::Io { .. } => exit::FAILURE,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }
}

impl From<tempres_core::Error> for CliError {
    fn from(e: tempres_core::Error) -> Self {
        match e {
            tempres_core::Error::InvalidInput(m) => CliError::Usage(m),
            tempres_core::Error::Format(m) => CliError::Format(m),
            other => CliError::Core(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(CliError::Usage(msg.into()))
}
