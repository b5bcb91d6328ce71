use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NonPositiveMatrix { min_eigenvalue: f64 },

    #[error("imaginary part of curvature right-hand side did not cancel (relative residual {relative:e})")]
    ImaginaryResidual { relative: f64 },

    #[error("invalid basis frequencies: {0}")]
    InvalidFrequency(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("boundary conditions violated: {0}")]
    BoundaryViolation(String),

    #[error("matrix path is not positive at tau = {tau} (margin {margin:e})")]
    PositivityViolation { tau: f64, margin: f64 },

    #[error("integration grid too coarse: {steps} steps for {samples} protocol samples")]
    GridTooCoarse { steps: usize, samples: usize },

    #[error("covariance sum is singular")]
    SingularSum,

    #[error("parameter vector has length {found}, layout expects {expected}")]
    Decode { expected: usize, found: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid configuration at `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for failures of the numerical chain itself (as opposed to bad input files).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonPositiveMatrix { .. }
                | Error::ImaginaryResidual { .. }
                | Error::SingularSum
                | Error::PositivityViolation { .. }
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
