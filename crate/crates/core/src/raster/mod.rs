//! Differentiable surfel rasterization.
//!
//! Forward: project every surfel through the world-to-camera transform,
//! build the 2D screen-space covariance `JW Sigma W^T J^T`, and composite
//! color / semantics / elevation front-to-back per pixel. Backward: exact
//! analytic gradients of the rendered images with respect to every learnable
//! parameter, chained through exposure, compositing, projection and the
//! covariance factorization.

mod backward;
mod bev;
mod forward;

pub use backward::{render_backward, GradientBuffer};
pub use bev::{render_bev, render_bev_chunked, BevMaps};
pub use forward::render;

use nalgebra::Vector3;

use crate::geometry::{CameraModel, Pose};
use crate::scene::SurfelScene;

/// Model constants of the rasterizer. These are part of the compositing
/// definition: an independent evaluator must share them to agree with the
/// production renderer.
#[derive(Debug, Clone, Copy)]
pub struct RenderSettings {
    /// Low-pass floor added to the projected covariance diagonal, px^2.
    /// Rank-2 world covariances can project to singular 2x2 matrices
    /// without it.
    pub lowpass: f64,
    /// Splat extent in standard deviations; the Gaussian is truncated to 0
    /// beyond this Mahalanobis distance.
    pub cutoff_sigma: f64,
    /// Front-to-back compositing stops once transmittance falls below this.
    pub min_transmittance: f64,
    /// Keep per-pixel contributor lists for the backward pass.
    pub retain: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            lowpass: 0.3,
            cutoff_sigma: 3.0,
            min_transmittance: 1e-4,
            retain: false,
        }
    }
}

impl RenderSettings {
    pub fn retained() -> Self {
        RenderSettings {
            retain: true,
            ..Default::default()
        }
    }
}

/// One projected surfel, sorted front-to-back, with everything the per-pixel
/// loops need.
#[derive(Debug, Clone)]
pub struct Splat {
    /// Index into the scene's surfel arrays.
    pub surfel: u32,
    /// Projected center in continuous pixel coordinates.
    pub mu: [f64; 2],
    /// Inverse projected covariance (xx, xy, yy).
    pub inv_cov: [f64; 3],
    /// Activated opacity.
    pub alpha: f64,
    pub color: [f64; 3],
    /// Surfel elevation, composited into the elevation channel.
    pub z_world: f64,
    /// Compositing sort key (camera depth).
    pub depth: f64,
    /// Inclusive pixel bounds (col0, col1, row0, row1) of the truncated splat.
    pub bounds: [i32; 4],
}

/// Forward render result. `color` is post-exposure and unclamped; semantics
/// and elevation bypass the exposure model.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub class_count: usize,
    /// H*W*3, exposure applied, not clamped.
    pub color: Vec<f64>,
    /// H*W*C composited semantic logits.
    pub semantics: Vec<f64>,
    /// H*W accumulated alpha; transmittance is `1 - alpha`.
    pub alpha: Vec<f64>,
    /// H*W composited surfel elevation.
    pub elevation: Vec<f64>,
    /// Projected surfels in compositing order.
    pub splats: Vec<Splat>,
    /// Per pixel: (index into `splats`, Gaussian weight g), in compositing
    /// order, exactly the contributions the forward pass accumulated.
    /// Empty unless `RenderSettings::retain`.
    pub contributing: Vec<Vec<(u32, f64)>>,
    /// Surfels dropped for a singular projected covariance.
    pub skipped_singular: usize,
    /// Exposure parameters the color channel was rendered with.
    pub exposure: [f64; 2],
}

impl RenderOutput {
    /// Contributors of one pixel as (scene surfel index, weight) pairs.
    pub fn contributing_surfels(&self, row: usize, col: usize) -> Vec<(u32, f64)> {
        self.contributing[row * self.width + col]
            .iter()
            .map(|&(s, g)| (self.splats[s as usize].surfel, g))
            .collect()
    }
}

/// Ground-plane culling box for a perspective camera: the camera's x and z
/// axes are projected onto the world xy plane and extruded +/-20 m laterally
/// and +40 m forward. Returns indices of surfels inside the box.
pub fn cull_frustum(scene: &SurfelScene, cam_pose_world: &Pose, cam: &CameraModel) -> Vec<u32> {
    cull_frustum_extent(scene, cam_pose_world, cam, 20.0, 40.0)
}

/// `cull_frustum` with explicit lateral/forward extents, in meters.
pub fn cull_frustum_extent(
    scene: &SurfelScene,
    cam_pose_world: &Pose,
    cam: &CameraModel,
    lateral: f64,
    forward: f64,
) -> Vec<u32> {
    let cam_world = cam_pose_world.compose(&cam.extrinsic);
    let c = cam_world.translation;
    let x_axis: Vector3<f64> = cam_world.rotation.column(0).into_owned();
    let z_axis: Vector3<f64> = cam_world.rotation.column(2).into_owned();

    let xa = [x_axis.x, x_axis.y];
    let za = [z_axis.x, z_axis.y];
    let xn = (xa[0] * xa[0] + xa[1] * xa[1]).sqrt();
    let zn = (za[0] * za[0] + za[1] * za[1]).sqrt();
    if xn < 1e-9 || zn < 1e-9 {
        // Camera axis points straight up/down; the box is undefined. Fall
        // back to a radius cull that can only over-include.
        let r2 = (lateral + forward) * (lateral + forward);
        return (0..scene.len() as u32)
            .filter(|&i| {
                let [x, y] = scene.xy[i as usize];
                let dx = x - c.x;
                let dy = y - c.y;
                dx * dx + dy * dy <= r2
            })
            .collect();
    }
    let xa = [xa[0] / xn, xa[1] / xn];
    let za = [za[0] / zn, za[1] / zn];

    use rayon::prelude::*;
    (0..scene.len() as u32)
        .into_par_iter()
        .filter(|&i| {
            let [x, y] = scene.xy[i as usize];
            let dx = x - c.x;
            let dy = y - c.y;
            let along_x = dx * xa[0] + dy * xa[1];
            let along_z = dx * za[0] + dy * za[1];
            along_x.abs() <= lateral && (0.0..=forward).contains(&along_z)
        })
        .collect()
}
