use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or extents that do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An architecture, config or input that violates a documented invariant.
    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// A class score became non-finite. `traces` holds the per-string
    /// traces (or plaquette-layer scores) of the offending sample.
    #[error("numeric overflow: {message} (string traces: {traces:?})")]
    NumericOverflow { message: String, traces: Vec<f64> },

    #[error("state space of {states} exceeds the oracle limit of {limit}")]
    Resource { states: u128, limit: u128 },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}
