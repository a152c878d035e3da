//! Shared helpers for integration tests: hand-built scenes, cameras, and a
//! naive per-pixel compositing oracle kept independent of the production
//! rasterizer's tiling, culling and binning.

use nalgebra::{Matrix2, Matrix3, Vector3};
use rand::rngs::StdRng;
use rand::Rng;

use roadsurfel::geometry::{CameraKind, CameraModel, Pose};
use roadsurfel::scene::{ClassDef, Layout, SurfelScene, EMPTY_CELL};

/// Model constants shared with the production rasterizer's defaults.
pub const LOWPASS: f64 = 0.3;
pub const CUTOFF_Q: f64 = 9.0;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
pub const ALPHA_MAX: f64 = 1.0 - 1e-7;

pub fn test_palette(class_count: usize) -> Vec<ClassDef> {
    (0..class_count)
        .map(|i| ClassDef {
            id: i as u8,
            name: format!("class{i}"),
            color: [(40 * i) as u8, (80 * i % 255) as u8, (160 * i % 255) as u8],
        })
        .collect()
}

/// A free-form scene for rasterizer tests: surfels scattered near the origin
/// plane, random appearance, no meaningful lattice.
pub fn manual_scene(rng: &mut StdRng, n: usize, class_count: usize) -> SurfelScene {
    let mut scene = SurfelScene {
        xy: Vec::new(),
        z: Vec::new(),
        log_scale: Vec::new(),
        opacity_logit: Vec::new(),
        quat: Vec::new(),
        color: Vec::new(),
        sem: Vec::new(),
        grid_origin: [-2.0, -2.0],
        grid_resolution: 0.1,
        rows: 2,
        cols: 2,
        lattice: vec![EMPTY_CELL; 4],
        road_mask: vec![false; 4],
        center_lattice: vec![EMPTY_CELL; 1],
        vertex_count: n,
        layout: Layout::One,
        class_count,
        palette: test_palette(class_count),
    };
    for _ in 0..n {
        scene
            .xy
            .push([rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)]);
        scene.z.push(rng.gen_range(-0.3..0.3));
        scene.log_scale.push([
            rng.gen_range(0.08f64..0.5).ln(),
            rng.gen_range(0.08f64..0.5).ln(),
        ]);
        scene
            .opacity_logit
            .push(roadsurfel::scene::logit(rng.gen_range(0.25..0.85)));
        let q = [
            rng.gen_range(0.5..1.0),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
        ];
        scene.quat.push(q);
        scene.color.push([
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
        ]);
        for _ in 0..class_count {
            scene.sem.push(rng.gen_range(-1.0..1.0));
        }
    }
    scene
}

/// A camera 3 m above the origin looking straight down, so the manual
/// scene's surfels fill the view.
pub fn downward_camera(width: usize, height: usize) -> (Pose, CameraModel) {
    // Camera axes in world: x right, y into -world-y, z down.
    let rot = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
    let vehicle = Pose::identity();
    let mut cam = CameraModel::perspective(
        "down",
        (width as f64) * 0.45,
        (width as f64) * 0.45,
        (width as f64 - 1.0) / 2.0,
        (height as f64 - 1.0) / 2.0,
        width,
        height,
        Pose::new(rot, Vector3::new(0.0, 0.0, 3.0)),
    );
    cam.exposure_a = 0.0;
    cam.exposure_b = 0.0;
    (vehicle, cam)
}

/// Naive evaluation of the compositing model: per pixel, loop over every
/// surfel, project, sort by (depth, index), composite with the same model
/// constants. No culling, no tiles, no bounding boxes.
pub struct NaiveOutput {
    pub color: Vec<f64>,
    pub semantics: Vec<f64>,
    pub alpha: Vec<f64>,
    pub elevation: Vec<f64>,
}

pub fn naive_render(scene: &SurfelScene, vehicle: &Pose, cam: &CameraModel) -> NaiveOutput {
    let width = cam.width;
    let height = cam.height;
    let class_count = scene.class_count;
    let cam_world = vehicle.compose(&cam.extrinsic);
    let w_rot = cam_world.rotation.transpose();
    let w_trans = -(w_rot * cam_world.translation);

    struct P {
        idx: usize,
        mu: [f64; 2],
        inv: [f64; 3],
        depth: f64,
        alpha: f64,
    }

    let mut projected: Vec<P> = Vec::new();
    for i in 0..scene.len() {
        let center = Vector3::new(scene.xy[i][0], scene.xy[i][1], scene.z[i]);
        let p_cam = w_rot * center + w_trans;
        let (mu, jac, depth) = match cam.kind {
            CameraKind::Perspective => {
                if p_cam.z <= 0.1 {
                    continue;
                }
                let mu = [
                    cam.fx * p_cam.x / p_cam.z + cam.cx,
                    cam.fy * p_cam.y / p_cam.z + cam.cy,
                ];
                let j = [
                    [
                        cam.fx / p_cam.z,
                        0.0,
                        -cam.fx * p_cam.x / (p_cam.z * p_cam.z),
                    ],
                    [
                        0.0,
                        cam.fy / p_cam.z,
                        -cam.fy * p_cam.y / (p_cam.z * p_cam.z),
                    ],
                ];
                (mu, j, p_cam.z)
            }
            CameraKind::Orthographic => {
                let s = 1.0 / cam.ortho_scale;
                (
                    [p_cam.x * s + cam.cx, p_cam.y * s + cam.cy],
                    [[s, 0.0, 0.0], [0.0, s, 0.0]],
                    -p_cam.z,
                )
            }
        };

        // Covariance projected by hand.
        let n = (scene.quat[i][0].powi(2)
            + scene.quat[i][1].powi(2)
            + scene.quat[i][2].powi(2)
            + scene.quat[i][3].powi(2))
        .sqrt();
        let (qw, qx, qy, qz) = (
            scene.quat[i][0] / n,
            scene.quat[i][1] / n,
            scene.quat[i][2] / n,
            scene.quat[i][3] / n,
        );
        let rot = Matrix3::new(
            1.0 - 2.0 * (qy * qy + qz * qz),
            2.0 * (qx * qy - qw * qz),
            2.0 * (qx * qz + qw * qy),
            2.0 * (qx * qy + qw * qz),
            1.0 - 2.0 * (qx * qx + qz * qz),
            2.0 * (qy * qz - qw * qx),
            2.0 * (qx * qz - qw * qy),
            2.0 * (qy * qz + qw * qx),
            1.0 - 2.0 * (qx * qx + qy * qy),
        );
        let sx = scene.log_scale[i][0].exp();
        let sy = scene.log_scale[i][1].exp();
        let sigma3 =
            rot * Matrix3::from_diagonal(&Vector3::new(sx * sx, sy * sy, 0.0)) * rot.transpose();
        let sigma_cam = w_rot * sigma3 * w_rot.transpose();
        let mut m = Matrix2::zeros();
        for a in 0..2 {
            for b in 0..2 {
                let mut acc = 0.0;
                for p in 0..3 {
                    for q in 0..3 {
                        acc += jac[a][p] * sigma_cam[(p, q)] * jac[b][q];
                    }
                }
                m[(a, b)] = acc;
            }
        }
        m[(0, 0)] += LOWPASS;
        m[(1, 1)] += LOWPASS;
        let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
        if det <= 1e-12 {
            continue;
        }
        let inv = [m[(1, 1)] / det, -m[(0, 1)] / det, m[(0, 0)] / det];
        let alpha = (1.0 / (1.0 + (-scene.opacity_logit[i]).exp())).min(ALPHA_MAX);
        projected.push(P {
            idx: i,
            mu,
            inv,
            depth,
            alpha,
        });
    }
    projected.sort_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .unwrap()
            .then(a.idx.cmp(&b.idx))
    });

    let gain = cam.exposure_a.exp();
    let mut out = NaiveOutput {
        color: vec![0.0; width * height * 3],
        semantics: vec![0.0; width * height * class_count],
        alpha: vec![0.0; width * height],
        elevation: vec![0.0; width * height],
    };
    for row in 0..height {
        for col in 0..width {
            let pi = row * width + col;
            let mut t = 1.0f64;
            for p in &projected {
                let du = col as f64 - p.mu[0];
                let dv = row as f64 - p.mu[1];
                let q = p.inv[0] * du * du + 2.0 * p.inv[1] * du * dv + p.inv[2] * dv * dv;
                if q > CUTOFF_Q {
                    continue;
                }
                let g = (-0.5 * q).exp();
                let a = p.alpha * g;
                let wgt = t * a;
                for ch in 0..3 {
                    out.color[pi * 3 + ch] += wgt * scene.color[p.idx][ch];
                }
                for j in 0..class_count {
                    out.semantics[pi * class_count + j] +=
                        wgt * scene.sem[p.idx * class_count + j];
                }
                out.alpha[pi] += wgt;
                out.elevation[pi] += wgt * scene.z[p.idx];
                t *= 1.0 - a;
                if t < MIN_TRANSMITTANCE {
                    break;
                }
            }
            for ch in 0..3 {
                out.color[pi * 3 + ch] = gain * out.color[pi * 3 + ch] + cam.exposure_b;
            }
        }
    }
    out
}

/// All surfel indices, for rendering without culling.
pub fn all_indices(scene: &SurfelScene) -> Vec<u32> {
    (0..scene.len() as u32).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
