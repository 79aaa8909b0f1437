//! Dense guidance from sparse depth or disparity measurements.
//!
//! The crate turns a handful of trusted range measurements (LiDAR returns, radar
//! points, subsampled sensor rows) into dense, confidence-weighted guidance maps
//! and pushes that guidance into several stages of a depth-estimation pipeline:
//!
//! 1. [`expansion`] grows each sparse point into a patch of suggested values with
//!    per-pixel confidence, either by intensity flood fill or by a trainable
//!    parametric kernel, and aggregates overlapping patches.
//! 2. [`guidance`] consumes the expanded maps: blending them into a dense
//!    prediction, reweighting cost-volume features, or interpolating
//!    normalization parameters.
//! 3. [`gdc`] corrects a predicted depth map by propagating anchored values
//!    through a k-nearest-neighbor graph over the back-projected point cloud.
//! 4. [`synth`] generates the deterministic synthetic scenes, corruptions,
//!    sampling patterns and cost volumes the test suite measures everything on,
//!    and [`metrics`] scores the results.
//!
//! All randomness flows through explicit seeds; identical inputs give
//! bit-identical outputs.

pub mod camera;
pub mod expansion;
pub mod field;
pub mod gdc;
pub mod guidance;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod synth;

/// Crate-wide error type.
///
/// `Config` covers invalid parameters and malformed inputs; `Numerical` covers
/// solver divergence, singular systems and iteration caps, and maps to its own
/// process exit code in the CLI.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// Malformed file content; `offset` is the byte position where parsing failed
    /// when it is known.
    #[error("format error in {path}: {message}{}", offset.map(|o| format!(" at byte {o}")).unwrap_or_default())]
    Format {
        path: String,
        message: String,
        offset: Option<u64>,
    },
    #[error("representation mismatch: expected {expected}, found {found}")]
    Representation { expected: String, found: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn format(path: impl Into<String>, msg: impl Into<String>, offset: Option<u64>) -> Self {
        Error::Format {
            path: path.into(),
            message: msg.into(),
            offset,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
