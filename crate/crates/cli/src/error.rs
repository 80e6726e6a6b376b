use thiserror::Error;

/// Command failures, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Core(#[from] gaitrdae::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    /// 2 for usage and configuration problems, 3 for numeric failures, 1 for
    /// I/O.
    pub fn exit_code(&self) -> i32 {
        use gaitrdae::Error as E;
        match self {
            Self::Usage(_) | Self::Config(_) => 2,
            Self::Numeric(_) => 3,
            Self::Core(e) => match e {
                E::NonFinite { .. } => 3,
                E::Io { .. } => 1,
                _ => 2,
            },
        }
    }
}
