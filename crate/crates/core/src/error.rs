use std::path::PathBuf;

use crate::model::ClassId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid label: {0}")]
    InvalidLabel(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },

    #[error("sweep at t={sweep:.6}s is not older than keyframe at t={keyframe:.6}s (or exceeds the 0.45 s window)")]
    SweepOrdering { keyframe: f64, sweep: f64 },

    #[error("too many history sweeps: {0} (at most 9)")]
    TooManySweeps(usize),

    #[error("degenerate point set for plane fitting: {0}")]
    DegeneratePlane(String),

    #[error("fitted plane is vertical (normal z-component {0:.3e})")]
    VerticalPlane(f64),

    #[error("no plane found: best consensus {inliers} of {required} required inliers")]
    NoPlaneFound { inliers: usize, required: usize },

    #[error("classes with no samples cannot be drawn: {0:?}")]
    EmptyClasses(Vec<ClassId>),

    #[error("shape mismatch: {0}")]
    Shape(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            message: message.into(),
        }
    }
}
