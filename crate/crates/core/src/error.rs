use std::io;

use thiserror::Error;

/// Failure modes of the adapter transport.
#[derive(Debug, Error)]
pub enum TransportError {
    #[error("adapter did not answer within {0} ms")]
    Timeout(u64),
    #[error("malformed adapter message: {0}")]
    Malformed(String),
    #[error("adapter process exited ({0})")]
    ProcessExit(String),
    #[error("adapter response violates the contract: {0}")]
    Validation(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("adapter i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite numeric input: {0}")]
    NumericInput(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("while evaluating instance {instance}, fa {fa}: {source}")]
    Context {
        instance: String,
        fa: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage, 2 data, 3 numeric/protocol.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parameter(_) => 1,
            Error::Data(_) | Error::Parse { .. } | Error::Io { .. } => 2,
            Error::Context { source, .. } => source.exit_code(),
            Error::NumericInput(_)
            | Error::Shape(_)
            | Error::Consistency(_)
            | Error::Training { .. }
            | Error::Transport(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
