//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A point to be projected lies behind (or too close to) the camera.
    #[error("point behind camera: z = {z:.6} <= near plane {near:.3}")]
    BehindCamera { z: f64, near: f64 },

    /// Layout construction was given no poses.
    #[error("cannot build a scene from an empty pose list")]
    EmptyScene,

    /// The pose bounding box collapses below a single lattice cell.
    #[error("degenerate scene extent {width:.3} m x {height:.3} m at resolution {resolution} m")]
    DegenerateExtent {
        width: f64,
        height: f64,
        resolution: f64,
    },

    /// A pose's up axis is nearly horizontal; Eq-of-plane initialization would divide by ~0.
    #[error("near-vertical pose {index}: |n33| = {n33:.2e} <= 1e-3 (corrupt pose data?)")]
    NearVerticalPose { index: usize, n33: f64 },

    /// A loss was asked to average over an empty mask.
    #[error("empty mask: no valid pixels to compute {loss} over")]
    EmptyMask { loss: &'static str },

    /// A loss component came out NaN or infinite.
    #[error("non-finite loss at step {step}: {component} = {value}")]
    NonFiniteLoss {
        step: u64,
        component: &'static str,
        value: f64,
    },

    /// Mean |z| blew past the divergence guard during training.
    #[error("scene diverged at step {step}: mean |z| = {mean_abs_z:.3} m exceeds guard {guard:.3} m")]
    DivergedScene {
        step: u64,
        mean_abs_z: f64,
        guard: f64,
    },

    /// Checkpoint header/version mismatch or truncated data.
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    /// A point-cloud frame could not be associated with any image frame in time.
    #[error("no frame within {threshold:.3} s of cloud at t = {timestamp:.3} s")]
    NoAssociation { timestamp: f64, threshold: f64 },

    /// Elevation evaluation found zero surfels with a ground-truth point in radius.
    #[error("no surfel matched a ground-truth point within {radius} m")]
    NoMatches { radius: f64 },

    /// Evaluation was requested without any usable ground truth.
    #[error("missing ground truth: {0}")]
    MissingGt(String),

    /// A synthetic-scene spec failed validation.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// Scene-directory structure or file contents are malformed.
    #[error("invalid scene directory: {0}")]
    InvalidSceneDir(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit-code class for the CLI: 1 = input error, 2 = numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteLoss { .. } | Error::DivergedScene { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
