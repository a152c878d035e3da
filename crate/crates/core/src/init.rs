//! Pose-based initialization of surfel elevation and rotation.
//!
//! Each surfel adopts the rotation of the nearest vehicle pose (xy distance
//! only) and an elevation on that pose's xy-plane: the vehicle body is
//! assumed parallel to the road, so the surfel lies on the plane through the
//! pose with normal n3, giving
//! `z_i = z_v - (n31 (x_i - x_v) + n32 (y_i - y_v)) / n33`.

use std::collections::HashMap;

use nalgebra::UnitQuaternion;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::scene::SurfelScene;

/// How much of the nearest pose to transfer onto each surfel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Plane-constraint elevation plus pose rotation.
    Full,
    /// Elevation copied directly from the pose (valid when roll/pitch are small).
    ZOnly,
}

/// Uniform xy spatial hash over pose positions, used to answer nearest-pose
/// queries without an O(poses) scan per surfel. Correctness is defined by the
/// brute-force argmin; the hash only accelerates it.
pub struct PoseHash {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<u32>>,
}

impl PoseHash {
    pub fn build(poses: &[Pose], cell: f64) -> PoseHash {
        assert!(cell > 0.0);
        let mut buckets: HashMap<(i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in poses.iter().enumerate() {
            let key = (
                (p.translation.x / cell).floor() as i64,
                (p.translation.y / cell).floor() as i64,
            );
            buckets.entry(key).or_default().push(i as u32);
        }
        PoseHash { cell, buckets }
    }

    /// Index of the pose nearest to `(x, y)` in the xy plane; ties broken by
    /// the lowest pose index. Scans square rings outward until the closest
    /// possible cell in the next ring cannot beat the best hit found.
    pub fn nearest(&self, poses: &[Pose], x: f64, y: f64) -> usize {
        let qc = (x / self.cell).floor() as i64;
        let qr = (y / self.cell).floor() as i64;
        let mut best: Option<(f64, u32)> = None;
        let mut ring: i64 = 0;
        loop {
            // Any cell in ring k is at least (k-1) * cell away from the query.
            if let Some((bd, _)) = best {
                let ring_min = (ring - 1).max(0) as f64 * self.cell;
                if ring_min * ring_min > bd {
                    break;
                }
            }
            let visit = |cc: i64, rr: i64, best: &mut Option<(f64, u32)>| {
                if let Some(items) = self.buckets.get(&(cc, rr)) {
                    for &i in items {
                        let p = &poses[i as usize];
                        let dx = p.translation.x - x;
                        let dy = p.translation.y - y;
                        let d = dx * dx + dy * dy;
                        let better = match *best {
                            None => true,
                            Some((bd, bi)) => d < bd || (d == bd && i < bi),
                        };
                        if better {
                            *best = Some((d, i));
                        }
                    }
                }
            };
            if ring == 0 {
                visit(qc, qr, &mut best);
            } else {
                for cc in (qc - ring)..=(qc + ring) {
                    visit(cc, qr - ring, &mut best);
                    visit(cc, qr + ring, &mut best);
                }
                for rr in (qr - ring + 1)..(qr + ring) {
                    visit(qc - ring, rr, &mut best);
                    visit(qc + ring, rr, &mut best);
                }
            }
            ring += 1;
            // Hard stop once the ring has swept past every bucket.
            if best.is_none() && ring > 4 {
                let span = self
                    .buckets
                    .keys()
                    .map(|(c, r)| (qc - c).abs().max((qr - r).abs()))
                    .max()
                    .unwrap_or(0);
                if ring > span {
                    // Exhaustive fallback; only reachable with pathological hashes.
                    let mut bi = 0u32;
                    let mut bd = f64::INFINITY;
                    for (i, p) in poses.iter().enumerate() {
                        let dx = p.translation.x - x;
                        let dy = p.translation.y - y;
                        let d = dx * dx + dy * dy;
                        if d < bd {
                            bd = d;
                            bi = i as u32;
                        }
                    }
                    return bi as usize;
                }
            }
        }
        best.expect("nearest query on empty pose set").1 as usize
    }
}

/// Brute-force nearest pose in xy, ties to the lowest index.
pub fn nearest_pose_xy(poses: &[Pose], query_xy: [f64; 2]) -> usize {
    assert!(!poses.is_empty(), "nearest_pose_xy on empty pose list");
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, p) in poses.iter().enumerate() {
        let dx = p.translation.x - query_xy[0];
        let dy = p.translation.y - query_xy[1];
        let d = dx * dx + dy * dy;
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Initialize every surfel's elevation and rotation from the nearest pose.
///
/// Idempotent: depends only on the pose list and the fixed surfel xy grid.
pub fn init_from_poses(scene: &mut SurfelScene, poses: &[Pose], mode: InitMode) -> Result<()> {
    if poses.is_empty() {
        return Err(Error::EmptyScene);
    }
    let hash = PoseHash::build(poses, 4.0 * scene.grid_resolution);

    let nearest: Vec<u32> = (0..scene.len())
        .into_par_iter()
        .map(|i| hash.nearest(poses, scene.xy[i][0], scene.xy[i][1]) as u32)
        .collect();

    // Validate poses that are actually used before mutating the scene.
    let mut used = vec![false; poses.len()];
    for &pi in &nearest {
        used[pi as usize] = true;
    }
    for (pi, u) in used.iter().enumerate() {
        if *u {
            let n33 = poses[pi].up_axis().z;
            if n33.abs() <= 1e-3 {
                return Err(Error::NearVerticalPose { index: pi, n33 });
            }
        }
    }

    // Pose rotations as wxyz quaternions, converted once.
    let pose_quats: Vec<[f64; 4]> = poses
        .iter()
        .map(|p| {
            let q = UnitQuaternion::from_rotation_matrix(
                &nalgebra::Rotation3::from_matrix_unchecked(p.rotation),
            );
            let qv = q.quaternion();
            [qv.w, qv.i, qv.j, qv.k]
        })
        .collect();

    for i in 0..scene.len() {
        let pose = &poses[nearest[i] as usize];
        let [x, y] = scene.xy[i];
        let n3 = pose.up_axis();
        scene.z[i] = match mode {
            InitMode::Full => {
                pose.translation.z
                    - (n3.x * (x - pose.translation.x) + n3.y * (y - pose.translation.y)) / n3.z
            }
            InitMode::ZOnly => pose.translation.z,
        };
        scene.quat[i] = pose_quats[nearest[i] as usize];
    }
    Ok(())
}
