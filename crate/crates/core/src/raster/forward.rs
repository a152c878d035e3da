//! Forward surfel rasterization: project, sort, composite.

use nalgebra::{Matrix2, Matrix3, Vector3};
use rayon::prelude::*;

use crate::geometry::{world_to_camera_transform, CameraKind, CameraModel, Pose, NEAR_PLANE};
use crate::scene::{quat_to_rotation, SurfelScene};

use super::{RenderOutput, RenderSettings, Splat};

pub(crate) const TILE: usize = 16;

enum Prep {
    Splat(Splat),
    Singular,
    Offscreen,
}

/// Project one surfel into a splat, or report why it produced none.
fn prepare_splat(
    scene: &SurfelScene,
    w: &Pose,
    cam: &CameraModel,
    settings: &RenderSettings,
    i: u32,
) -> Prep {
    let idx = i as usize;
    let center = scene.center(idx);
    let p_cam = w.transform_point(&center);

    let proj = match cam.kind {
        CameraKind::Perspective => {
            if p_cam.z <= NEAR_PLANE {
                return Prep::Offscreen;
            }
            match crate::geometry::project_perspective(cam, &p_cam) {
                Ok(p) => p,
                Err(_) => return Prep::Offscreen,
            }
        }
        CameraKind::Orthographic => crate::geometry::project_orthographic(cam, &p_cam),
    };

    let [sx, sy] = scene.scale(idx);
    let rot = quat_to_rotation(&scene.quat[idx]);
    let sigma3 = rot
        * Matrix3::from_diagonal(&Vector3::new(sx * sx, sy * sy, 0.0))
        * rot.transpose();
    let sigma_cam = w.rotation * sigma3 * w.rotation.transpose();
    let v = proj.jacobian;
    let mut cov2: Matrix2<f64> = v * sigma_cam * v.transpose();
    cov2[(0, 0)] += settings.lowpass;
    cov2[(1, 1)] += settings.lowpass;

    let det = cov2[(0, 0)] * cov2[(1, 1)] - cov2[(0, 1)] * cov2[(0, 1)];
    if det <= 1e-12 {
        return Prep::Singular;
    }
    let inv_cov = [
        cov2[(1, 1)] / det,
        -cov2[(0, 1)] / det,
        cov2[(0, 0)] / det,
    ];

    let trace = cov2[(0, 0)] + cov2[(1, 1)];
    let disc = ((cov2[(0, 0)] - cov2[(1, 1)]).powi(2) + 4.0 * cov2[(0, 1)].powi(2)).sqrt();
    let lambda_max = 0.5 * (trace + disc);
    let radius = settings.cutoff_sigma * lambda_max.max(0.0).sqrt();

    let col0 = (proj.u - radius).ceil().max(0.0) as i64;
    let col1 = (proj.u + radius).floor().min(cam.width as f64 - 1.0) as i64;
    let row0 = (proj.v - radius).ceil().max(0.0) as i64;
    let row1 = (proj.v + radius).floor().min(cam.height as f64 - 1.0) as i64;
    if col0 > col1 || row0 > row1 {
        return Prep::Offscreen;
    }

    Prep::Splat(Splat {
        surfel: i,
        mu: [proj.u, proj.v],
        inv_cov,
        alpha: scene.alpha(idx),
        color: scene.color[idx],
        z_world: center.z,
        depth: proj.depth,
        bounds: [col0 as i32, col1 as i32, row0 as i32, row1 as i32],
    })
}

/// Project `culled` surfels and sort them into compositing order
/// (ascending depth, ties by surfel index). Returns the splats and the
/// number skipped for singular projected covariance.
pub(crate) fn prepare_splats(
    scene: &SurfelScene,
    w: &Pose,
    cam: &CameraModel,
    culled: &[u32],
    settings: &RenderSettings,
) -> (Vec<Splat>, usize) {
    let preps: Vec<Prep> = culled
        .par_iter()
        .map(|&i| prepare_splat(scene, w, cam, settings, i))
        .collect();

    let mut skipped_singular = 0usize;
    let mut splats: Vec<Splat> = Vec::with_capacity(preps.len());
    for p in preps {
        match p {
            Prep::Splat(s) => splats.push(s),
            Prep::Singular => skipped_singular += 1,
            Prep::Offscreen => {}
        }
    }
    splats.sort_unstable_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .unwrap()
            .then(a.surfel.cmp(&b.surfel))
    });
    (splats, skipped_singular)
}

/// Raw (pre-exposure) compositing buffers for one pixel window.
pub(crate) struct WindowBuffers {
    pub color: Vec<f64>,
    pub semantics: Vec<f64>,
    pub alpha: Vec<f64>,
    pub elevation: Vec<f64>,
    pub contributing: Vec<Vec<(u32, f64)>>,
}

/// Composite `bin` (indices into `splats`, already in compositing order)
/// over the pixel window starting at global (col0, row0). Pixels are
/// addressed in global image coordinates, so a windowed render is
/// bit-identical to the same window of a full render.
pub(crate) fn composite_window(
    scene: &SurfelScene,
    splats: &[Splat],
    bin: &[u32],
    settings: &RenderSettings,
    col0: usize,
    row0: usize,
    win_w: usize,
    win_h: usize,
) -> WindowBuffers {
    let class_count = scene.class_count;
    let cutoff_q = settings.cutoff_sigma * settings.cutoff_sigma;
    let mut out = WindowBuffers {
        color: vec![0.0; win_w * win_h * 3],
        semantics: vec![0.0; win_w * win_h * class_count],
        alpha: vec![0.0; win_w * win_h],
        elevation: vec![0.0; win_w * win_h],
        contributing: vec![Vec::new(); if settings.retain { win_w * win_h } else { 0 }],
    };
    for lr in 0..win_h {
        for lc in 0..win_w {
            let pxi = (col0 + lc) as i32;
            let pyi = (row0 + lr) as i32;
            let px = pxi as f64;
            let py = pyi as f64;
            let li = lr * win_w + lc;
            let mut t = 1.0f64;
            for &si in bin {
                let s = &splats[si as usize];
                if pxi < s.bounds[0] || pxi > s.bounds[1] || pyi < s.bounds[2] || pyi > s.bounds[3]
                {
                    continue;
                }
                let du = px - s.mu[0];
                let dv = py - s.mu[1];
                let q = s.inv_cov[0] * du * du
                    + 2.0 * s.inv_cov[1] * du * dv
                    + s.inv_cov[2] * dv * dv;
                if q > cutoff_q {
                    continue;
                }
                let g = (-0.5 * q).exp();
                let a = s.alpha * g;
                let wgt = t * a;
                out.color[li * 3] += wgt * s.color[0];
                out.color[li * 3 + 1] += wgt * s.color[1];
                out.color[li * 3 + 2] += wgt * s.color[2];
                let sem = scene.sem_slice(s.surfel as usize);
                for (acc, sv) in out.semantics[li * class_count..(li + 1) * class_count]
                    .iter_mut()
                    .zip(sem.iter())
                {
                    *acc += wgt * sv;
                }
                out.alpha[li] += wgt;
                out.elevation[li] += wgt * s.z_world;
                if settings.retain {
                    out.contributing[li].push((si, g));
                }
                t *= 1.0 - a;
                if t < settings.min_transmittance {
                    break;
                }
            }
        }
    }
    out
}

/// Render the culled surfels into the camera: color (with the camera's
/// exposure applied), composited semantic logits, accumulated alpha and a
/// composited elevation channel.
pub fn render(
    scene: &SurfelScene,
    cam_pose: &Pose,
    cam: &CameraModel,
    culled: &[u32],
    settings: &RenderSettings,
) -> RenderOutput {
    let w = world_to_camera_transform(cam_pose, cam);
    let class_count = scene.class_count;
    let width = cam.width;
    let height = cam.height;

    let (splats, skipped_singular) = prepare_splats(scene, &w, cam, culled, settings);

    // Bin splats into tiles, preserving compositing order per tile.
    let tiles_x = width.div_ceil(TILE);
    let tiles_y = height.div_ceil(TILE);
    let mut tile_bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (si, s) in splats.iter().enumerate() {
        let tx0 = s.bounds[0] as usize / TILE;
        let tx1 = s.bounds[1] as usize / TILE;
        let ty0 = s.bounds[2] as usize / TILE;
        let ty1 = s.bounds[3] as usize / TILE;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tile_bins[ty * tiles_x + tx].push(si as u32);
            }
        }
    }

    let tile_outs: Vec<(usize, WindowBuffers)> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let tx = tile % tiles_x;
            let ty = tile / tiles_x;
            let x0 = tx * TILE;
            let y0 = ty * TILE;
            let tw = TILE.min(width - x0);
            let th = TILE.min(height - y0);
            let buf = composite_window(
                scene,
                &splats,
                &tile_bins[tile],
                settings,
                x0,
                y0,
                tw,
                th,
            );
            (tile, buf)
        })
        .collect();

    let mut output = RenderOutput {
        width,
        height,
        class_count,
        color: vec![0.0; width * height * 3],
        semantics: vec![0.0; width * height * class_count],
        alpha: vec![0.0; width * height],
        elevation: vec![0.0; width * height],
        splats,
        contributing: vec![Vec::new(); if settings.retain { width * height } else { 0 }],
        skipped_singular,
        exposure: [cam.exposure_a, cam.exposure_b],
    };

    let gain = cam.exposure_a.exp();
    for (tile, mut t) in tile_outs {
        let tx = tile % tiles_x;
        let ty = tile / tiles_x;
        let x0 = tx * TILE;
        let y0 = ty * TILE;
        let tw = TILE.min(width - x0);
        let th = TILE.min(height - y0);
        for lr in 0..th {
            for lc in 0..tw {
                let li = lr * tw + lc;
                let gi = (y0 + lr) * width + (x0 + lc);
                for ch in 0..3 {
                    output.color[gi * 3 + ch] = gain * t.color[li * 3 + ch] + cam.exposure_b;
                }
                output.semantics[gi * class_count..(gi + 1) * class_count]
                    .copy_from_slice(&t.semantics[li * class_count..(li + 1) * class_count]);
                output.alpha[gi] = t.alpha[li];
                output.elevation[gi] = t.elevation[li];
                if settings.retain {
                    output.contributing[gi] = std::mem::take(&mut t.contributing[li]);
                }
            }
        }
    }
    output
}
