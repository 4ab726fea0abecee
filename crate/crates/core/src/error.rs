use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, ranges, labels).
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// NaN or infinity surfaced where a finite value is required.
    #[error("non-finite value in {op} (node {node:?}, step {step:?})")]
    NonFinite {
        op: &'static str,
        node: Option<usize>,
        step: Option<usize>,
    },

    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: u64, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{context} at epoch {epoch}, batch {batch}: {source}")]
    Training {
        epoch: usize,
        batch: usize,
        context: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attaches an optimization-step index to a numeric failure.
    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            Error::NonFinite { op, node, .. } => Error::NonFinite {
                op,
                node,
                step: Some(step),
            },
            other => other,
        }
    }
}
