use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures raised by the synthesis pipeline.
///
/// Validation-class errors map to CLI exit code 2; numerical failures
/// (singular blocks, unidentified parameters) map to exit code 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("study {study}: {message}")]
    Study { study: String, message: String },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    #[error("unsupported format: {0}")]
    Unsupported(String),

    #[error("study {study}: covariance matrix is not positive-definite")]
    NotPositiveDefinite { study: String },

    #[error("unidentified parameters: {}", .0.join(", "))]
    Unidentified(Vec<String>),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn study(study: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Study {
            study: study.into(),
            message: message.into(),
        }
    }

    pub(crate) fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NotPositiveDefinite { .. } | Error::Unidentified(_) | Error::Singular(_) => 3,
            _ => 2,
        }
    }

    pub fn is_numerical(&self) -> bool {
        self.exit_code() == 3
    }
}
