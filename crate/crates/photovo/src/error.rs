use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("grid dimension mismatch: expected {expected_w}x{expected_h}, got {got_w}x{got_h} ({context})")]
    DimensionMismatch {
        expected_w: usize,
        expected_h: usize,
        got_w: usize,
        got_h: usize,
        context: &'static str,
    },

    #[error("transform is not rigid: {0}")]
    NonRigidTransform(String),

    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("depth must be positive, got {0}")]
    InvalidDepth(f64),

    #[error("degenerate window: no active pixels remain")]
    DegenerateWindow,

    #[error("warp result carries no sampled source depth (occlusion mask needs one)")]
    MissingSampledDepth,

    #[error("non-finite energy encountered: {0}")]
    NonFiniteEnergy(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: {msg}")]
    File { path: PathBuf, msg: String },

    #[error("trajectory mismatch: {0}")]
    TrajectoryMismatch(String),

    #[error("scene geometry error: {0}")]
    Scene(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn file(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::File {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
