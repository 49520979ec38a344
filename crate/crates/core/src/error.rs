use std::fmt;

use dexlab_numcore::NumError;

#[derive(Debug)]
pub enum CoreError {
    Num(NumError),
    /// Invalid or inconsistent configuration.
    Config(String),
    /// Bad user-supplied data (token ids, corpus, spans).
    Input(String),
    /// Malformed checkpoint; `offset` is the byte position of the fault.
    Format { offset: u64, detail: String },
    /// Optimizer met a NaN/Inf gradient.
    NonFiniteGrad { param: String },
    /// Gradient descent blew up.
    Diverged { op: &'static str, detail: String },
    Io(std::io::Error),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Num(e) => e.fmt(f),
            Self::Config(m) => write!(f, "config error: {m}"),
            Self::Input(m) => write!(f, "input error: {m}"),
            Self::Format { offset, detail } => {
                write!(f, "format error at byte {offset}: {detail}")
            }
            Self::NonFiniteGrad { param } => {
                write!(f, "numeric error: non-finite gradient in parameter {param}")
            }
            Self::Diverged { op, detail } => write!(f, "numeric error in {op}: {detail}"),
            Self::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for CoreError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Num(e) => Some(e),
            Self::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl CoreError {
    /// Short category used on the command line's error line.
    pub fn category(&self) -> &'static str {
        match self {
            Self::Num(NumError::Dimension { .. }) => "dimension",
            Self::Num(NumError::Contract(_)) => "contract",
            Self::Num(_) | Self::NonFiniteGrad { .. } | Self::Diverged { .. } => "numeric",
            Self::Config(_) => "config",
            Self::Input(_) => "input",
            Self::Format { .. } => "format",
            Self::Io(_) => "io",
        }
    }
}

impl From<NumError> for CoreError {
    fn from(e: NumError) -> Self {
        Self::Num(e)
    }
}

impl From<std::io::Error> for CoreError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn config_err(msg: impl Into<String>) -> CoreError {
    CoreError::Config(msg.into())
}

pub(crate) fn input_err(msg: impl Into<String>) -> CoreError {
    CoreError::Input(msg.into())
}
