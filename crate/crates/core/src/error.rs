use alloc::string::String;
use core::fmt;

use crate::tensor::Shape;

/// Errors raised by tensor operations, model construction and metrics.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible. `detail` names the offending dimension.
    Shape { op: &'static str, detail: String },
    /// An argument or configuration value is outside its valid domain.
    Invalid { what: &'static str, detail: String },
    /// `backward` was called on a tensor that is not a single element.
    NonScalarRoot(Shape),
    /// The optimizer found a parameter without a gradient.
    MissingGradient(String),
    /// A parameter name was looked up but never registered.
    UnknownParameter(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::Invalid { what, detail } => write!(f, "invalid {what}: {detail}"),
            Error::NonScalarRoot(s) => write!(f, "backward root must be a scalar, got shape {s}"),
            Error::MissingGradient(name) => write!(f, "parameter `{name}` has no gradient"),
            Error::UnknownParameter(name) => write!(f, "unknown parameter `{name}`"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
