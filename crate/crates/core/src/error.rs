use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("direction is the zero vector")]
    ZeroDirection,

    #[error("ray origin {origin:?} is not strictly inside the cube of half-size {half_size}")]
    OriginOutsideCube { origin: [f64; 3], half_size: f64 },

    #[error("mask selects no pixels")]
    EmptyMask,

    #[error("loss became non-finite at iteration {0}")]
    Divergence(usize),

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("malformed manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("panorama {path} is {width}x{height}, expected a 2:1 aspect")]
    Aspect {
        path: PathBuf,
        width: usize,
        height: usize,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable numeric code per failure class, surfaced by the CLI in its
    /// diagnostics.
    pub fn code(&self) -> u32 {
        match self {
            Error::InvalidArgument(_) => 10,
            Error::Shape(_) => 11,
            Error::ZeroDirection => 12,
            Error::OriginOutsideCube { .. } => 13,
            Error::EmptyMask => 14,
            Error::Divergence(_) => 20,
            Error::MissingFile(_) => 30,
            Error::Manifest { .. } => 31,
            Error::Aspect { .. } => 32,
            Error::Format { .. } => 33,
            Error::Io { .. } => 34,
        }
    }

    /// True for failures caused by numerics rather than by inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Divergence(_))
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingFile(path.into());
        }
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
