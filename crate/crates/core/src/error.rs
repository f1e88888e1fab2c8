//! Error types shared across the engine.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A value or record violated an operation's preconditions.
    #[error("invalid input: {0}")]
    Input(String),

    /// A configuration value was out of range or unknown.
    #[error("config error: {0}")]
    Config(String),

    /// An operation was attempted on a cell in the wrong lifecycle state.
    #[error("state error: {0}")]
    State(String),

    /// A text line could not be parsed. `line` is 1-based, `column` is 1-based when known.
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn parse(line: usize, column: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            column,
            message: msg.into(),
        }
    }

    /// Re-tags a parse error with the given line number; other variants pass through.
    pub fn at_line(self, line: usize) -> Self {
        match self {
            Error::Parse {
                column, message, ..
            } => Error::Parse {
                line,
                column,
                message,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
