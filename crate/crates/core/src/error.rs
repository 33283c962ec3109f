use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible. `axis` names the offending axis.
    #[error("{op}: shape mismatch on {axis}: {detail}")]
    Shape {
        op: &'static str,
        axis: String,
        detail: String,
    },

    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    /// A container or archive could not be decoded.
    #[error("{}: malformed data at byte {offset}: {detail}", file.display())]
    Format {
        file: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("parameter set mismatch: missing [{}], extra [{}]", missing.join(", "), extra.join(", "))]
    ParamMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },

    #[error("parameter `{path}`: {detail}")]
    Param { path: String, detail: String },

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, axis: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            axis: axis.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
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

    /// Short machine-greppable class name used by the command line front end.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument { .. } => "invalid-argument",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::MissingGradient(_) => "missing-gradient",
            Error::ParamMismatch { .. } => "param-mismatch",
            Error::Param { .. } => "param",
            Error::Numeric(_) => "numeric",
        }
    }
}
