use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

/// Malformed binary input, located by byte offset.
#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic at byte 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported version {found} at byte {offset} (expected {expected})")]
    Version { offset: u64, expected: u32, found: u32 },
    #[error("truncated {what} at byte {offset}")]
    Truncated { what: String, offset: u64 },
    #[error("truncated sample {index} at byte {offset}")]
    TruncatedSample { index: usize, offset: u64 },
    #[error("invalid {what} at byte {offset}: {detail}")]
    Invalid { what: String, offset: u64, detail: String },
    #[error("{extra} trailing bytes after byte {offset}")]
    Trailing { offset: u64, extra: u64 },
}

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, configs or input files: exit code 1.
    #[error("{0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },
    /// Failures while running valid work: exit code 2.
    #[error("{0}")]
    Runtime(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Core(#[from] lsta_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) | CliError::Format { .. } => 1,
            CliError::Core(lsta_core::Error::InvalidConfig(_)) => 1,
            CliError::Runtime(_) | CliError::Io { .. } | CliError::Core(_) => 2,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}
