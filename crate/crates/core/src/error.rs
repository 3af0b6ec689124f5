use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error in `{field}`: {message}")]
    Format { field: String, message: String },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("synchronization error: {0}")]
    Synchronization(String),

    #[error("alignment failure: {0}")]
    AlignmentFailure(String),

    #[error("degenerate training: token `{token}` has zero occupancy")]
    DegenerateTraining { token: String },

    #[error("training diverged (loss = {loss}); reduce the learning rate")]
    Divergence { loss: f64 },

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("signal already normalized")]
    AlreadyNormalized,

    #[error("empty request: {0}")]
    EmptyRequest(String),

    #[error("out-of-vocabulary word `{0}`")]
    OutOfVocabulary(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn dim(context: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            found,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
