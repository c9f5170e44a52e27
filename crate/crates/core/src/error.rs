use std::path::PathBuf;

use thiserror::Error;

use crate::codec::WireError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("state error: {0}")]
    State(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error(transparent)]
    Wire(#[from] WireError),

    #[error("format error in {file} at byte {offset}: {reason}")]
    Format {
        file: String,
        offset: u64,
        reason: String,
    },

    #[error("partition error: {0}")]
    Partition(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("node {node}, round {round}: {source}")]
    Node {
        node: usize,
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn at_node(self, node: usize, round: usize) -> Self {
        match self {
            e @ Error::Node { .. } => e,
            e => Error::Node {
                node,
                round,
                source: Box::new(e),
            },
        }
    }
}
