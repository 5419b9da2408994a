use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("layout mismatch: expected group sizes {expected:?}, got {got:?}")]
    LayoutMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("ratio undefined: {0} has zero norm")]
    UndefinedRatio(&'static str),

    #[error("corrupt encoding: {0}")]
    CorruptEncoding(String),

    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("divergence at round {round}{}: {what}", client.map(|c| format!(", client {c}")).unwrap_or_default())]
    Divergence {
        round: usize,
        client: Option<usize>,
        what: &'static str,
    },

    #[error("invariant violated at round {round}: {what}")]
    Invariant { round: usize, what: String },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
