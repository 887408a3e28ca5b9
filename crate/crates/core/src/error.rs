//! Crate-wide error type with machine-greppable categories.

use std::io;

/// Errors produced by loaders, validators, kernels, and the pipeline runtime.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Manifest text that does not parse.
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },
    /// Graph-level validation failure (duplicate names, dangling references,
    /// cycles, unreachable layers).
    #[error("{0}")]
    Graph(String),
    /// Inconsistent tensor or layer dimensions.
    #[error("{0}")]
    Shape(String),
    /// File I/O and binary-format problems.
    #[error("{0}")]
    Io(String),
    /// A resource budget (DSP lanes, channel configuration) was exceeded.
    #[error("{0}")]
    Capacity(String),
    /// A pipeline worker failed while a network was running.
    #[error("{0}")]
    Run(String),
}

impl Error {
    /// Category prefix used on the CLI error path, stable for grepping.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Parse { .. } | Error::Graph(_) => "PARSE",
            Error::Shape(_) => "SHAPE",
            Error::Io(_) => "IO",
            Error::Capacity(_) => "CAPACITY",
            Error::Run(_) => "RUN",
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
