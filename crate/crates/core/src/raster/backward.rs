//! Analytic backward pass of the surfel rasterizer.
//!
//! Gradients flow from the upstream per-pixel color/semantic gradients
//! through the exposure model, the front-to-back compositing weights, the 2D
//! Gaussian evaluation, the projection (center and Jacobian), and the
//! covariance factorization `R diag(s^2) R^T`, down to every learnable
//! parameter: z, log-scale, opacity logit, quaternion, color, semantic
//! logits, and the camera's exposure pair.
//!
//! Three phases keep it deterministic under any thread count: a parallel
//! per-pixel replay producing per-contribution compositing gradients, a
//! sequential scatter into per-splat accumulators, and a parallel per-splat
//! chain rule through projection and covariance.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::geometry::{world_to_camera_transform, CameraKind, CameraModel, Pose};
use crate::scene::{quat_to_rotation, sigmoid, SurfelScene, ALPHA_MAX};

use super::{RenderOutput, RenderSettings};

/// Gradients for every learnable parameter, laid out exactly like the scene.
#[derive(Debug, Clone)]
pub struct GradientBuffer {
    pub z: Vec<f64>,
    pub log_scale: Vec<[f64; 2]>,
    pub opacity: Vec<f64>,
    pub quat: Vec<[f64; 4]>,
    pub color: Vec<[f64; 3]>,
    /// Flat N * class_count.
    pub sem: Vec<f64>,
    /// Per camera (d_a, d_b); only the rendering camera's slot is nonzero
    /// after a single backward pass.
    pub exposure: Vec<[f64; 2]>,
}

impl GradientBuffer {
    pub fn zeros(scene: &SurfelScene, camera_count: usize) -> Self {
        let n = scene.len();
        GradientBuffer {
            z: vec![0.0; n],
            log_scale: vec![[0.0; 2]; n],
            opacity: vec![0.0; n],
            quat: vec![[0.0; 4]; n],
            color: vec![[0.0; 3]; n],
            sem: vec![0.0; n * scene.class_count],
            exposure: vec![[0.0; 2]; camera_count],
        }
    }
}

/// d(rotation matrix)/d(unit quaternion component) for wxyz component `j`.
fn rotation_quat_derivative(qh: &[f64; 4], j: usize) -> Matrix3<f64> {
    let (w, x, y, z) = (qh[0], qh[1], qh[2], qh[3]);
    let m = match j {
        0 => Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0),
        1 => Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x),
        2 => Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y),
        _ => Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0),
    };
    m * 2.0
}

#[inline]
fn frob(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    a.component_mul(b).sum()
}

struct RowOut {
    /// (d_ak, w_k) per contribution, pixels of the row concatenated in order.
    per_contrib: Vec<(f64, f64)>,
    exposure: [f64; 2],
}

/// Exact gradients of the retained forward render.
///
/// `d_color` (H*W*3) and `d_sem` (H*W*C, may be empty) are the upstream
/// gradients with respect to the post-exposure color and the composited
/// semantic logits. `cam_index` routes the exposure gradient.
#[allow(clippy::too_many_arguments)]
pub fn render_backward(
    scene: &SurfelScene,
    cam_pose: &Pose,
    cam: &CameraModel,
    cam_index: usize,
    camera_count: usize,
    output: &RenderOutput,
    d_color: &[f64],
    d_sem: &[f64],
    _settings: &RenderSettings,
) -> GradientBuffer {
    assert!(
        !output.contributing.is_empty() || output.splats.is_empty(),
        "render_backward requires a forward pass with retained contributions"
    );
    assert_eq!(d_color.len(), output.width * output.height * 3);
    let class_count = output.class_count;
    let has_sem = !d_sem.is_empty();
    if has_sem {
        assert_eq!(d_sem.len(), output.width * output.height * class_count);
    }

    let width = output.width;
    let height = output.height;
    let gain = output.exposure[0].exp();
    let bias = output.exposure[1];
    let splats = &output.splats;

    let mut buffer = GradientBuffer::zeros(scene, camera_count);
    if splats.is_empty() {
        return buffer;
    }

    // Phase 1: per-pixel compositing gradients. For contribution k with
    // weight a_k = alpha_k g_k and prefix transmittance T_k:
    //   d(pixel)/d(a_k) = v_k T_k - S_k / (1 - a_k),
    // where v_k is the splat's channel value and S_k the suffix sum of
    // later contributions.
    let rows: Vec<RowOut> = (0..height)
        .into_par_iter()
        .map(|row| {
            let mut per_contrib = Vec::new();
            let mut exp_a = 0.0;
            let mut exp_b = 0.0;
            let mut t_stack: Vec<f64> = Vec::new();
            for col in 0..width {
                let pi = row * width + col;
                let contribs = &output.contributing[pi];
                let dc = [
                    gain * d_color[pi * 3],
                    gain * d_color[pi * 3 + 1],
                    gain * d_color[pi * 3 + 2],
                ];
                for ch in 0..3 {
                    exp_a += d_color[pi * 3 + ch] * (output.color[pi * 3 + ch] - bias);
                    exp_b += d_color[pi * 3 + ch];
                }
                if contribs.is_empty() {
                    continue;
                }

                t_stack.clear();
                let mut t = 1.0f64;
                for &(si, g) in contribs {
                    t_stack.push(t);
                    let a = splats[si as usize].alpha * g;
                    t *= 1.0 - a;
                }

                let base = per_contrib.len();
                per_contrib.resize(base + contribs.len(), (0.0, 0.0));
                let mut s_color = [0.0f64; 3];
                let mut s_sem = vec![0.0f64; if has_sem { class_count } else { 0 }];
                for k in (0..contribs.len()).rev() {
                    let (si, g) = contribs[k];
                    let s = &splats[si as usize];
                    let a = s.alpha * g;
                    let t_k = t_stack[k];
                    let w_k = t_k * a;
                    let inv_rest = 1.0 / (1.0 - a);
                    let mut da = 0.0;
                    for ch in 0..3 {
                        da += dc[ch] * (s.color[ch] * t_k - s_color[ch] * inv_rest);
                        s_color[ch] += s.color[ch] * w_k;
                    }
                    if has_sem {
                        let sem = scene.sem_slice(s.surfel as usize);
                        let dsp = &d_sem[pi * class_count..(pi + 1) * class_count];
                        for j in 0..class_count {
                            da += dsp[j] * (sem[j] * t_k - s_sem[j] * inv_rest);
                            s_sem[j] += sem[j] * w_k;
                        }
                    }
                    per_contrib[base + k] = (da, w_k);
                }
            }
            RowOut {
                per_contrib,
                exposure: [exp_a, exp_b],
            }
        })
        .collect();

    // Phase 2: sequential scatter into per-splat accumulators and directly
    // into the color/semantic gradient slots.
    // acc layout per splat: [gmu_u, gmu_v, gsig_xx, gsig_xy, gsig_yy]
    let mut acc = vec![[0.0f64; 5]; splats.len()];
    for (row, row_out) in rows.iter().enumerate() {
        let mut cursor = 0usize;
        for col in 0..width {
            let pi = row * width + col;
            let contribs = &output.contributing[pi];
            if contribs.is_empty() {
                continue;
            }
            let dc = [
                gain * d_color[pi * 3],
                gain * d_color[pi * 3 + 1],
                gain * d_color[pi * 3 + 2],
            ];
            for &(si, g) in contribs {
                let (da, w_k) = row_out.per_contrib[cursor];
                cursor += 1;
                let s = &splats[si as usize];
                let idx = s.surfel as usize;

                let gc = &mut buffer.color[idx];
                gc[0] += w_k * dc[0];
                gc[1] += w_k * dc[1];
                gc[2] += w_k * dc[2];
                if has_sem {
                    let dsp = &d_sem[pi * class_count..(pi + 1) * class_count];
                    let gs = &mut buffer.sem[idx * class_count..(idx + 1) * class_count];
                    for j in 0..class_count {
                        gs[j] += w_k * dsp[j];
                    }
                }

                // Opacity through the (clamp-guarded) sigmoid.
                let raw = sigmoid(scene.opacity_logit[idx]);
                if raw < ALPHA_MAX {
                    buffer.opacity[idx] += da * g * raw * (1.0 - raw);
                }

                // Gaussian weight: g = exp(-q/2), q = d^T A d.
                let dq = -0.5 * g * da * s.alpha;
                let du = col as f64 - s.mu[0];
                let dv = row as f64 - s.mu[1];
                let ad_u = s.inv_cov[0] * du + s.inv_cov[1] * dv;
                let ad_v = s.inv_cov[1] * du + s.inv_cov[2] * dv;
                let a = &mut acc[si as usize];
                a[0] += -2.0 * dq * ad_u;
                a[1] += -2.0 * dq * ad_v;
                // dq/dA as a full symmetric matrix, then dL/dSigma' = -A G A.
                let ga_xx = dq * du * du;
                let ga_xy = dq * du * dv;
                let ga_yy = dq * dv * dv;
                let (ixx, ixy, iyy) = (s.inv_cov[0], s.inv_cov[1], s.inv_cov[2]);
                // -A * GA * A, expanded for the 2x2 symmetric case.
                let m00 = ixx * ga_xx + ixy * ga_xy;
                let m01 = ixx * ga_xy + ixy * ga_yy;
                let m10 = ixy * ga_xx + iyy * ga_xy;
                let m11 = ixy * ga_xy + iyy * ga_yy;
                a[2] += -(m00 * ixx + m01 * ixy);
                a[3] += -(m00 * ixy + m01 * iyy);
                a[4] += -(m10 * ixy + m11 * iyy);
            }
        }
        buffer.exposure[cam_index][0] += row_out.exposure[0];
        buffer.exposure[cam_index][1] += row_out.exposure[1];
    }

    // Phase 3: chain each splat's mu / Sigma' gradients through projection
    // and the covariance factorization. Each splat owns a distinct surfel,
    // so the scatter is race-free.
    let w = world_to_camera_transform(cam_pose, cam);
    let updates: Vec<(u32, f64, [f64; 2], [f64; 4])> = splats
        .par_iter()
        .zip(acc.par_iter())
        .filter(|(_, a)| a.iter().any(|v| *v != 0.0))
        .map(|(s, a)| {
            let idx = s.surfel as usize;
            let gmu = Vector2::new(a[0], a[1]);
            let gsig = Matrix2::new(a[2], a[3], a[3], a[4]);

            let center = scene.center(idx);
            let p_cam = w.transform_point(&center);
            let v: Matrix2x3<f64> = match cam.kind {
                CameraKind::Perspective => {
                    crate::geometry::project_perspective(cam, &p_cam)
                        .expect("splat was projected forward")
                        .jacobian
                }
                CameraKind::Orthographic => {
                    crate::geometry::project_orthographic(cam, &p_cam).jacobian
                }
            };
            let [sx, sy] = scene.scale(idx);
            let q_raw = scene.quat[idx];
            let rot = quat_to_rotation(&q_raw);
            let m_diag = Matrix3::from_diagonal(&Vector3::new(sx * sx, sy * sy, 0.0));
            let sigma3 = rot * m_diag * rot.transpose();
            let sigma_cam = w.rotation * sigma3 * w.rotation.transpose();

            // Projected center path.
            let mut d_pcam: Vector3<f64> = v.transpose() * gmu;

            // Jacobian path (perspective only; the orthographic J is constant).
            if cam.kind == CameraKind::Perspective {
                let dv_mat: Matrix2x3<f64> = 2.0 * gsig * v * sigma_cam;
                let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
                let inv_z2 = 1.0 / (z * z);
                let inv_z3 = inv_z2 / z;
                d_pcam.x += dv_mat[(0, 2)] * (-cam.fx * inv_z2);
                d_pcam.y += dv_mat[(1, 2)] * (-cam.fy * inv_z2);
                d_pcam.z += dv_mat[(0, 0)] * (-cam.fx * inv_z2)
                    + dv_mat[(1, 1)] * (-cam.fy * inv_z2)
                    + dv_mat[(0, 2)] * (2.0 * cam.fx * x * inv_z3)
                    + dv_mat[(1, 2)] * (2.0 * cam.fy * y * inv_z3);
            }

            // Covariance path: Sigma' -> Sigma_cam -> Sigma3 -> (R, s).
            let gc: Matrix3<f64> = v.transpose() * gsig * v;
            let g3 = w.rotation.transpose() * gc * w.rotation;
            let d_rot = 2.0 * g3 * rot * m_diag;
            let k = rot.transpose() * g3 * rot;
            let g_log_sx = 2.0 * sx * sx * k[(0, 0)];
            let g_log_sy = 2.0 * sy * sy * k[(1, 1)];

            let n = (q_raw[0] * q_raw[0]
                + q_raw[1] * q_raw[1]
                + q_raw[2] * q_raw[2]
                + q_raw[3] * q_raw[3])
                .sqrt();
            let qh = [q_raw[0] / n, q_raw[1] / n, q_raw[2] / n, q_raw[3] / n];
            let mut g_qh = [0.0f64; 4];
            for (j, slot) in g_qh.iter_mut().enumerate() {
                *slot = frob(&d_rot, &rotation_quat_derivative(&qh, j));
            }
            let dot = qh[0] * g_qh[0] + qh[1] * g_qh[1] + qh[2] * g_qh[2] + qh[3] * g_qh[3];
            let g_q = [
                (g_qh[0] - qh[0] * dot) / n,
                (g_qh[1] - qh[1] * dot) / n,
                (g_qh[2] - qh[2] * dot) / n,
                (g_qh[3] - qh[3] * dot) / n,
            ];

            // Only z of the world center is learnable.
            let g_z = w.rotation.column(2).dot(&d_pcam);

            (s.surfel, g_z, [g_log_sx, g_log_sy], g_q)
        })
        .collect();

    for (surfel, g_z, g_ls, g_q) in updates {
        let idx = surfel as usize;
        buffer.z[idx] += g_z;
        buffer.log_scale[idx][0] += g_ls[0];
        buffer.log_scale[idx][1] += g_ls[1];
        for j in 0..4 {
            buffer.quat[idx][j] += g_q[j];
        }
    }

    buffer
}
