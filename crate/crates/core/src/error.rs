use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
///
/// Variants split into two families: I/O problems (`Io`, `Json` while
/// reading files) and everything else, which the CLI reports as a
/// validation failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("container entry `{name}`: {reason}")]
    Container { name: String, reason: String },

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("non-finite value produced in layer {layer}")]
    NonFinite { layer: usize },

    #[error("{what} index {index} out of range (limit {limit})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn container(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Container {
            name: name.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures caused by the filesystem rather than by bad inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
