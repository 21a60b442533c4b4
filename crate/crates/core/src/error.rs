use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// The byte layout of a file does not match its format.
    #[error("format error: {0}")]
    Format(String),

    /// Well-formed data with invalid content (non-finite values, unknown ids, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A configuration value violates its schema; `path` is the dotted field path.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("projection is empty: no point could be projected")]
    EmptyProjection,

    /// Every pixel of a loss term was ignored; callers skip the term.
    #[error("loss term has no contributing pixels")]
    EmptyLoss,

    #[error("confusion matrix is empty")]
    EmptyEval,

    #[error("invalid state: {0}")]
    State(String),

    #[error("non-finite loss in term `{term}` at iteration {iteration}")]
    NonFiniteLoss { term: String, iteration: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn shape(message: impl Into<String>) -> Self {
        Self::Shape(message.into())
    }
}
