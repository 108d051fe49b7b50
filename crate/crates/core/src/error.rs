use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("attention mask leaves query row {row} without any visible key")]
    FullyMasked { row: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{}", format_location(.path, .line, .message))]
    Format {
        path: Option<PathBuf>,
        line: Option<u64>,
        message: String,
    },

    #[error("training aborted: non-finite loss at epoch {epoch}, batch {batch} (segments {segments:?})")]
    Diverged {
        epoch: usize,
        batch: usize,
        segments: Vec<usize>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{}: {source}", .path.display())]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn format_location(path: &Option<PathBuf>, line: &Option<u64>, message: &str) -> String {
    match (path, line) {
        (Some(p), Some(l)) => format!("format error in {}, line {l}: {message}", p.display()),
        (Some(p), None) => format!("format error in {}: {message}", p.display()),
        (None, Some(l)) => format!("format error at line {l}: {message}"),
        (None, None) => format!("format error: {message}"),
    }
}

/// Coarse classification used by the command-line front end to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Usage(_) => ErrorKind::Usage,
            Error::Shape { .. }
            | Error::InvalidShape { .. }
            | Error::Data(_)
            | Error::Format { .. }
            | Error::Io(_)
            | Error::File { .. } => ErrorKind::Data,
            Error::NonFinite(_) | Error::FullyMasked { .. } | Error::Diverged { .. } => {
                ErrorKind::Numeric
            }
        }
    }

    pub(crate) fn file(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| Error::File {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn format(line: Option<u64>, message: impl Into<String>) -> Self {
        Error::Format {
            path: None,
            line,
            message: message.into(),
        }
    }
}
