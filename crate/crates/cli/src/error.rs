use fourplane_core::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Core(Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Core(Error::Json(e))
    }
}

impl CliError {
    /// 2 for bad invocations or configs, 3 for unreadable or invalid
    /// inputs, 4 for numeric failures such as a NaN loss.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Core(Error::Config(_)) => EXIT_USAGE,
            Self::Core(Error::Numeric(_)) => EXIT_NUMERIC,
            Self::Data(_) | Self::Core(_) => EXIT_DATA,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn data(msg: impl Into<String>) -> CliError {
    CliError::Data(msg.into())
}
