use std::path::PathBuf;

/// Errors raised by the engine, file formats and commands.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {left:?} vs {right:?} ({op})")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    Numeric(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("checksum mismatch for {}: expected {expected}, found {found}", path.display())]
    Checksum {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("data validation failed: {0}")]
    Data(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("json error on {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code: 2 usage, 3 io, 4 data validation, 5 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Parameter(_) => 2,
            Error::Io { .. } | Error::MissingFile(_) | Error::Image { .. } => 3,
            Error::Numeric(_) => 5,
            Error::Dimension { .. }
            | Error::Shape(_)
            | Error::Config(_)
            | Error::State(_)
            | Error::Checksum { .. }
            | Error::Data(_)
            | Error::Json { .. } => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }
}
