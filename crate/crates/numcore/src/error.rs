use std::fmt;

/// Failure modes of tensor construction, kernels and the autodiff tape.
#[derive(Debug, Clone, PartialEq)]
pub enum NumError {
    /// Operand extents do not line up.
    Dimension { op: &'static str, detail: String },
    /// A NaN or infinity appeared in an operand or a result.
    NonFinite { op: &'static str, index: usize },
    /// An operation was called outside its domain (log of a non-positive value, ...).
    Domain { op: &'static str, detail: String },
    /// The caller broke an API contract (non-scalar loss, double backward, ...).
    Contract(String),
    /// An iterative routine ran out of iterations.
    NoConvergence { op: &'static str, iterations: usize },
}

impl fmt::Display for NumError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Dimension { op, detail } => write!(f, "dimension error in {op}: {detail}"),
            Self::NonFinite { op, index } => {
                write!(f, "numeric error in {op}: non-finite value at element {index}")
            }
            Self::Domain { op, detail } => write!(f, "numeric error in {op}: {detail}"),
            Self::Contract(msg) => write!(f, "contract violation: {msg}"),
            Self::NoConvergence { op, iterations } => {
                write!(f, "numeric error in {op}: no convergence after {iterations} iterations")
            }
        }
    }
}

impl std::error::Error for NumError {}

pub type Result<T> = std::result::Result<T, NumError>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> NumError {
    NumError::Dimension {
        op,
        detail: detail.into(),
    }
}
