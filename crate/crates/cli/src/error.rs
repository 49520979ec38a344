use std::fmt;

use dexlab_core::CoreError;

#[derive(Debug)]
pub enum CliError {
    /// Bad command line; exit status 2.
    Usage(String),
    Core(CoreError),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Core(CoreError::Config(msg.into()))
    }

    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Core(CoreError::Input(msg.into()))
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => e.category(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(CoreError::Io(e))
    }
}

impl From<dexlab_numcore::NumError> for CliError {
    fn from(e: dexlab_numcore::NumError) -> Self {
        CliError::Core(CoreError::Num(e))
    }
}
