use std::fmt;
use std::path::Path;

use stabprune::Error;

/// Failure of a CLI command, classified by process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config file, architecture or schedule. Exit code 2.
    Config(String),
    /// Unreadable or mismatched data and checkpoints. Exit code 3.
    Data(String),
    /// Non-finite loss or values during training. Exit code 4.
    Divergence(String),
    /// Anything else, including failures to write outputs. Exit code 1.
    Other(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }

    /// Failure writing an output file.
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Other(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Divergence(m) => write!(f, "numeric divergence: {m}"),
            CliError::Other(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidArgument(_) | Error::Architecture(_) | Error::Pruning(_) => CliError::Config(msg),
            Error::Data { .. } | Error::Checkpoint(_) | Error::Io { .. } => CliError::Data(msg),
            Error::Divergence { .. } | Error::NonFinite(_) => CliError::Divergence(msg),
            Error::ShapeMismatch { .. } | Error::Layer { .. } => CliError::Other(msg),
        }
    }
}
