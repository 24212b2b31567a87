use std::fmt;

/// Error type shared by every module of the crate.
#[derive(Debug, thiserror::Error)]
pub enum LensError {
    #[error("{op}: shape mismatch between {left} and {right}")]
    Shape {
        op: &'static str,
        left: ShapeList,
        right: ShapeList,
    },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("failed to converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("fixed-point iteration diverged after {iterations} iterations (measured spectral norm {spectral_norm:.4})")]
    Divergence {
        iterations: usize,
        spectral_norm: f64,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("unregistered primitive `{0}`")]
    UnknownPrimitive(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LensError>;

/// Coarse classification used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl LensError {
    pub fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        LensError::Shape {
            op,
            left: ShapeList(left.to_vec()),
            right: ShapeList(right.to_vec()),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        LensError::InvalidInput(msg.into())
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            LensError::Config(_) | LensError::Json(_) | LensError::UnknownPrimitive(_) => {
                ErrorKind::Config
            }
            LensError::NonConvergence { .. }
            | LensError::Divergence { .. }
            | LensError::Numerical(_) => ErrorKind::Numerical,
            LensError::Shape { .. }
            | LensError::InvalidInput(_)
            | LensError::InsufficientData(_)
            | LensError::Format(_)
            | LensError::Io(_) => ErrorKind::Data,
        }
    }
}

/// A tensor shape rendered as `[a, b, c]` in error messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeList(pub Vec<usize>);

impl fmt::Display for ShapeList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}
