use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("insufficient points: need {needed}, have {available}")]
    InsufficientPoints { needed: usize, available: usize },
    #[error("degenerate point cloud: bounding box has zero extent")]
    DegenerateCloud,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("point cloud has no normals")]
    MissingNormals,
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error("non-finite gradient in parameter block {0}")]
    NonFiniteGradient(String),
    #[error("{path}: format error: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: missing required property `{property}`")]
    MissingProperty { path: PathBuf, property: String },
    #[error("{path}: line {line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: view {view}: {field} has {got} entries, expected {expected}")]
    ShapeMismatch {
        path: PathBuf,
        view: usize,
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{path}: bad magic bytes")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported format version {found} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: unexpected end of file while reading {what}")]
    UnexpectedEof { path: PathBuf, what: &'static str },
    #[error("{path}: file not found")]
    MissingFile { path: PathBuf },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile { path }
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for failures caused by bad or missing data rather than numerics or usage.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Format { .. }
                | Error::MissingProperty { .. }
                | Error::Parse { .. }
                | Error::ShapeMismatch { .. }
                | Error::BadMagic { .. }
                | Error::VersionMismatch { .. }
                | Error::UnexpectedEof { .. }
                | Error::MissingFile { .. }
                | Error::Io { .. }
                | Error::DegenerateCloud
                | Error::EmptyInput(_)
                | Error::InsufficientPoints { .. }
                | Error::MissingNormals
        )
    }

    pub fn is_numeric_error(&self) -> bool {
        matches!(self, Error::NonFiniteInput(_) | Error::NonFiniteGradient(_))
    }
}
