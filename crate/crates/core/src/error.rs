use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported signal storage format {0}")]
    UnsupportedFormat(String),

    #[error("record {0} has no samples")]
    EmptyRecord(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("column {column} out of range (row {row} has {available} columns)")]
    ColumnOutOfRange {
        column: usize,
        row: usize,
        available: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("signal too short: {len} samples, need at least {required}")]
    SignalTooShort { len: usize, required: usize },

    #[error(
        "beat at sample {r_index} skipped: window [{start}, {end}) outside record of length {len}"
    )]
    BeatSkipped {
        r_index: usize,
        start: isize,
        end: isize,
        len: usize,
    },

    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    /// True for errors caused by bad configuration rather than bad data.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
