//! Chunked orthographic bird's-eye-view rendering.
//!
//! One virtual downward-looking orthographic camera covers the whole scene;
//! rendering it in one piece is memory- and compute-heavy for large scenes,
//! so the image is tiled into chunk x chunk windows, each rendered from the
//! surfels whose splats can reach it (tile footprint plus a cutoff-sigma
//! apron). Windows address pixels in global image coordinates, so the
//! stitched result is bit-identical to a monolithic render.

use rayon::prelude::*;

use crate::geometry::{CameraModel, Pose};
use crate::scene::SurfelScene;

use super::forward::{composite_window, prepare_splats};
use super::RenderSettings;

/// Stitched BEV maps. Pixel (row, col) is centered on world
/// `(origin + col * resolution, origin_y + row * resolution)`; when
/// `resolution` equals the scene's grid resolution, pixel centers coincide
/// with surfel centers.
#[derive(Debug, Clone)]
pub struct BevMaps {
    /// World xy of pixel (0, 0).
    pub origin: [f64; 2],
    pub resolution: f64,
    pub width: usize,
    pub height: usize,
    /// H*W*3 linear RGB, identity exposure, unclamped.
    pub rgb: Vec<f64>,
    /// H*W palette class ids (argmax of composited logits, ties to the
    /// lowest channel).
    pub labels: Vec<u8>,
    /// H*W composited surfel elevation, meters.
    pub elevation: Vec<f64>,
    /// H*W accumulated alpha (coverage).
    pub alpha: Vec<f64>,
}

/// Monolithic BEV render: one chunk covering the full extent.
pub fn render_bev(scene: &SurfelScene, resolution: f64, settings: &RenderSettings) -> BevMaps {
    render_bev_chunked(scene, resolution, usize::MAX, settings)
}

/// Tiled BEV render at `resolution` meters per pixel with `chunk`-pixel
/// square tiles.
pub fn render_bev_chunked(
    scene: &SurfelScene,
    resolution: f64,
    chunk: usize,
    settings: &RenderSettings,
) -> BevMaps {
    assert!(resolution > 0.0);
    assert!(chunk > 0);
    let (extent_x, extent_y) = scene.extent();
    let origin = scene.grid_origin;
    let width = (extent_x / resolution).floor() as usize + 1;
    let height = (extent_y / resolution).floor() as usize + 1;
    let class_count = scene.class_count;

    // The global virtual camera: world xy maps to pixel
    // (x - origin_x) / resolution, looking straight down (-z), so depth
    // sorts higher surfaces in front.
    let cam = CameraModel::orthographic(
        "bev",
        resolution,
        -origin[0] / resolution,
        -origin[1] / resolution,
        width,
        height,
        Pose::identity(),
    );
    let cam_pose = Pose::identity();
    let w = crate::geometry::world_to_camera_transform(&cam_pose, &cam);

    // Per-surfel reach bound in pixels: lambda_max of the projected
    // covariance is at most max(s_x, s_y)^2 / resolution^2 plus the
    // low-pass floor.
    let reach: Vec<f64> = (0..scene.len())
        .into_par_iter()
        .map(|i| {
            let [sx, sy] = scene.scale(i);
            let s_max = sx.max(sy);
            settings.cutoff_sigma * (s_max * s_max / (resolution * resolution) + settings.lowpass).sqrt()
        })
        .collect();

    let chunk = chunk.min(width.max(height));
    let tiles_x = width.div_ceil(chunk);
    let tiles_y = height.div_ceil(chunk);

    let mut maps = BevMaps {
        origin,
        resolution,
        width,
        height,
        rgb: vec![0.0; width * height * 3],
        labels: vec![0; width * height],
        elevation: vec![0.0; width * height],
        alpha: vec![0.0; width * height],
    };

    let no_retain = RenderSettings {
        retain: false,
        ..*settings
    };

    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let col0 = tx * chunk;
            let row0 = ty * chunk;
            let tw = chunk.min(width - col0);
            let th = chunk.min(height - row0);

            // Cull to the tile footprint plus each surfel's own apron.
            let culled: Vec<u32> = (0..scene.len() as u32)
                .into_par_iter()
                .filter(|&i| {
                    let [x, y] = scene.xy[i as usize];
                    let u = (x - origin[0]) / resolution;
                    let v = (y - origin[1]) / resolution;
                    let r = reach[i as usize];
                    u + r >= col0 as f64
                        && u - r <= (col0 + tw - 1) as f64
                        && v + r >= row0 as f64
                        && v - r <= (row0 + th - 1) as f64
                })
                .collect();

            let (splats, _skipped) = prepare_splats(scene, &w, &cam, &culled, &no_retain);
            let bin: Vec<u32> = (0..splats.len() as u32).collect();

            // Sub-tile the window so large chunks still parallelize.
            let sub = 64usize;
            let sub_x = tw.div_ceil(sub);
            let sub_y = th.div_ceil(sub);
            let parts: Vec<(usize, usize, usize, usize, super::forward::WindowBuffers)> = (0
                ..sub_x * sub_y)
                .into_par_iter()
                .map(|si| {
                    let sx = si % sub_x;
                    let sy = si / sub_x;
                    let c0 = col0 + sx * sub;
                    let r0 = row0 + sy * sub;
                    let sw = sub.min(col0 + tw - c0);
                    let sh = sub.min(row0 + th - r0);
                    let buf =
                        composite_window(scene, &splats, &bin, &no_retain, c0, r0, sw, sh);
                    (c0, r0, sw, sh, buf)
                })
                .collect();

            for (c0, r0, sw, sh, buf) in parts {
                for lr in 0..sh {
                    for lc in 0..sw {
                        let li = lr * sw + lc;
                        let gi = (r0 + lr) * width + (c0 + lc);
                        maps.rgb[gi * 3..gi * 3 + 3]
                            .copy_from_slice(&buf.color[li * 3..li * 3 + 3]);
                        maps.alpha[gi] = buf.alpha[li];
                        maps.elevation[gi] = buf.elevation[li];
                        let sem = &buf.semantics[li * class_count..(li + 1) * class_count];
                        let mut best = 0usize;
                        for (j, v) in sem.iter().enumerate() {
                            if *v > sem[best] {
                                best = j;
                            }
                        }
                        maps.labels[gi] = scene
                            .palette
                            .get(best)
                            .map(|c| c.id)
                            .unwrap_or(best as u8);
                    }
                }
            }
        }
    }
    maps
}
