//! Differentiable road-surface reconstruction from vehicle imagery.
//!
//! The road is modeled as a fixed meshgrid of 2D Gaussian surfels placed over
//! the expanded vehicle trajectory. Surfel elevation and rotation are
//! initialized from the nearest vehicle pose, then color, semantics, geometry
//! and per-camera exposure are optimized against camera images (optionally
//! with LiDAR elevation supervision). Results export as bird's-eye-view RGB,
//! semantic and elevation maps, with PSNR / mIoU / elevation-RMSE evaluation.

pub mod error;
pub mod geometry;
pub mod init;
pub mod losses;
pub mod raster;
pub mod scene;

pub use error::{Error, Result};
