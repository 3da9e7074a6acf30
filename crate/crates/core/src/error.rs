//! Error type shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an operation's inputs was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A pose vector contained a NaN or infinite entry.
    #[error("pose contains a non-finite entry at index {index}")]
    NonFinitePose { index: usize },

    /// Projection was requested for a point at or behind the camera plane.
    #[error("point behind camera (z = {z} mm)")]
    BehindCamera { z: f64 },

    /// Backprojection or cropping was requested with a non-positive depth.
    #[error("invalid depth (z = {z} mm)")]
    InvalidDepth { z: f64 },

    /// No valid depth was found at or around a lookup pixel.
    #[error("no valid depth in the neighborhood of ({u}, {v})")]
    DepthHole { u: f64, v: f64 },

    /// An observation had no valid joints to fit against.
    #[error("observation has no valid joints")]
    NoData,

    /// Bone-length calibration produced an unusable skeleton.
    #[error("calibration failed: {0}")]
    CalibrationFailure(String),

    /// A stream or config file did not match the expected layout.
    #[error("format error: {0}")]
    Format(String),

    /// A stream header's camera does not match the camera supplied by the caller.
    #[error("camera in stream header does not match the expected camera")]
    CameraMismatch,

    /// Evaluation was requested on a stream without ground truth.
    #[error("stream carries no ground truth")]
    MissingGroundTruth,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
