use std::path::PathBuf;

/// Errors raised anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index error in {op}: {detail}")]
    Index { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("mask error: {0}")]
    Mask(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn index(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Index {
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
}

pub type Result<T> = std::result::Result<T, Error>;
