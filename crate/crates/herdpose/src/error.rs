use std::path::PathBuf;

use herdpose_core::dataset::DatasetError;
use herdpose_core::eval::EvalError;
use herdpose_core::framing::FramingError;
use herdpose_core::synth::SynthError;
use herdpose_core::tracking::TrackingError;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_SCHEMA: i32 = 4;
pub const EXIT_PROCESSING: i32 = 5;

/// Exit-code table shown in `--help`.
pub const EXIT_CODES_HELP: &str = "\
Exit codes:
  0  success
  1  internal error
  2  usage error (unknown flag, invalid parameter value)
  3  missing or unreadable/unwritable file
  4  malformed input or schema/invariant violation
  5  evaluation, tracking or generation failure";

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse { path: PathBuf, line: usize, column: usize, message: String },
    #[error("{path}: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tracking(#[from] TrackingError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Framing(#[from] FramingError),
    #[error("{0}")]
    Internal(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<PathBuf>, e: &serde_json::Error) -> Self {
        Error::Parse { path: path.into(), line: e.line(), column: e.column(), message: e.to_string() }
    }

    pub fn schema(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Schema { path: path.into(), message: message.to_string() }
    }

    pub fn dataset(path: impl Into<PathBuf>, e: DatasetError) -> Self {
        Error::schema(path, e)
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => EXIT_IO,
            Error::Parse { .. } | Error::Schema { .. } | Error::Config(_) => EXIT_SCHEMA,
            Error::Usage(_) | Error::Framing(_) => EXIT_USAGE,
            Error::Eval(_) | Error::Tracking(_) | Error::Synth(_) => EXIT_PROCESSING,
            Error::Internal(_) => EXIT_OTHER,
        }
    }
}
