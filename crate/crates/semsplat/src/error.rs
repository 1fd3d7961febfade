use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the avatar pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller passed a value that violates an operation's precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value is out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Numerical failure (singular matrix, non-finite value).
    #[error("numerical error{}: {msg}", point.map(|i| format!(" at point {i}")).unwrap_or_default())]
    Numerical {
        msg: String,
        /// Index of the offending point, when known.
        point: Option<usize>,
    },

    /// An operation was invoked in the wrong state or with mismatched shapes.
    #[error("usage error: {0}")]
    Usage(String),

    /// Operation received an empty input that it cannot handle.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Annotator could not label a frame.
    #[error("annotation error: {0}")]
    Annotation(String),

    /// Training diverged (non-finite loss).
    #[error("training diverged at iteration {iteration}: {msg}")]
    Diverged { iteration: u64, msg: String },

    /// Malformed on-disk file.
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical {
            msg: msg.into(),
            point: None,
        }
    }

    pub fn at_point(self, index: usize) -> Self {
        match self {
            Error::Numerical { msg, .. } => Error::Numerical {
                msg,
                point: Some(index),
            },
            other => other,
        }
    }
}
