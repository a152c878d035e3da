//! Training objectives and their gradients.
//!
//! Masked L1 photometric loss, masked semantic cross-entropy over
//! soft-normalized rendered logits, a 4-neighbor elevation smoothness term on
//! the surfel lattice, and optional elevation supervision from a point cloud.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{LabeledImage, PointCloud};
use crate::raster::RenderOutput;
use crate::scene::SurfelScene;

/// Weights of the total objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub lambda_smooth: f64,
    pub lambda_z: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_c: 1.0,
            lambda_s: 0.06,
            lambda_smooth: 0.003,
            lambda_z: 0.02,
        }
    }
}

impl LossWeights {
    /// Defaults for runs with LiDAR elevation supervision: the smoothness
    /// weight is raised to 1.
    pub fn with_lidar() -> Self {
        LossWeights {
            lambda_smooth: 1.0,
            ..Default::default()
        }
    }
}

/// Masked mean absolute error over RGB, normalized per channel (|M| * 3).
///
/// Returns the loss and d(loss)/d(rendered color) as an H*W*3 image.
pub fn color_loss(render: &RenderOutput, target: &LabeledImage) -> Result<(f64, Vec<f64>)> {
    assert_eq!(render.width, target.width);
    assert_eq!(render.height, target.height);
    let m = target.mask_count();
    if m == 0 {
        return Err(Error::EmptyMask { loss: "color" });
    }
    let norm = 1.0 / (m as f64 * 3.0);
    let mut grad = vec![0.0; render.color.len()];
    let mut loss = 0.0;
    for pi in 0..target.mask.len() {
        if !target.mask[pi] {
            continue;
        }
        for ch in 0..3 {
            let d = render.color[pi * 3 + ch] - target.rgb[pi * 3 + ch];
            loss += d.abs();
            grad[pi * 3 + ch] = d.signum() * norm;
        }
    }
    Ok((loss * norm, grad))
}

/// Masked mean cross-entropy between softmax-normalized rendered semantic
/// logits and the hard target labels.
///
/// Returns the loss and d(loss)/d(rendered logits) as an H*W*C image.
pub fn semantic_loss(render: &RenderOutput, target: &LabeledImage) -> Result<(f64, Vec<f64>)> {
    assert_eq!(render.width, target.width);
    assert_eq!(render.height, target.height);
    let c = render.class_count;
    let m = target.mask_count();
    if m == 0 {
        return Err(Error::EmptyMask { loss: "semantic" });
    }
    let norm = 1.0 / m as f64;
    let mut grad = vec![0.0; render.semantics.len()];
    let mut loss = 0.0;
    for pi in 0..target.mask.len() {
        if !target.mask[pi] {
            continue;
        }
        let logits = &render.semantics[pi * c..(pi + 1) * c];
        let label = target.labels[pi] as usize;
        debug_assert!(label < c, "label {label} out of range for {c} classes");

        // Stable log-softmax.
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for l in logits {
            sum += (l - max).exp();
        }
        let log_sum = sum.ln() + max;
        loss += log_sum - logits[label];

        let g = &mut grad[pi * c..(pi + 1) * c];
        for (j, l) in logits.iter().enumerate() {
            let p = (l - max).exp() / sum;
            g[j] = (p - if j == label { 1.0 } else { 0.0 }) * norm;
        }
    }
    Ok((loss * norm, grad))
}

/// Elevation smoothness over the lattice's 4-neighborhoods:
/// sum over surfels and their up/down/left/right neighbors of
/// (z_i - z_j)^2, divided by K = 4. Boundary neighbors are self-mapped and
/// contribute zero.
///
/// Returns the loss and d(loss)/dz per surfel.
pub fn smooth_loss(scene: &SurfelScene, neighbors: &[Vec<u32>; 4]) -> (f64, Vec<f64>) {
    let k = 4.0;
    let mut loss = 0.0;
    let mut grad = vec![0.0; scene.len()];
    for table in neighbors {
        debug_assert_eq!(table.len(), scene.len());
        for (i, &j) in table.iter().enumerate() {
            let j = j as usize;
            if j == i {
                continue;
            }
            let d = scene.z[i] - scene.z[j];
            loss += d * d;
            grad[i] += 2.0 * d / k;
            grad[j] -= 2.0 * d / k;
        }
    }
    (loss / k, grad)
}

/// Per-surfel elevation targets prepared from a point cloud: for every
/// surfel, the z of the nearest cloud point within `radius` in the xy plane.
#[derive(Debug, Clone)]
pub struct ElevationTargets {
    /// Nearest-point elevation per surfel; NaN where no point is in radius.
    pub z_target: Vec<f64>,
    pub matched: usize,
}

impl ElevationTargets {
    /// Brute-force free: buckets the cloud on a uniform xy grid of cell size
    /// `radius`, then scans the 3x3 neighborhood per surfel.
    pub fn build(scene: &SurfelScene, cloud: &PointCloud, radius: f64) -> Self {
        assert!(radius > 0.0, "elevation radius must be positive");
        let mut buckets: HashMap<(i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in cloud.points.iter().enumerate() {
            let key = ((p.x / radius).floor() as i64, (p.y / radius).floor() as i64);
            buckets.entry(key).or_default().push(i as u32);
        }
        let z_target: Vec<f64> = (0..scene.len())
            .into_par_iter()
            .map(|i| {
                let [x, y] = scene.xy[i];
                let qc = (x / radius).floor() as i64;
                let qr = (y / radius).floor() as i64;
                let mut best: Option<(f64, u32)> = None;
                for dc in -1..=1 {
                    for dr in -1..=1 {
                        if let Some(items) = buckets.get(&(qc + dc, qr + dr)) {
                            for &pi in items {
                                let p = &cloud.points[pi as usize];
                                let dx = p.x - x;
                                let dy = p.y - y;
                                let d = dx * dx + dy * dy;
                                if d <= radius * radius {
                                    let better = match best {
                                        None => true,
                                        Some((bd, bi)) => d < bd || (d == bd && pi < bi),
                                    };
                                    if better {
                                        best = Some((d, pi));
                                    }
                                }
                            }
                        }
                    }
                }
                match best {
                    Some((_, pi)) => cloud.points[pi as usize].z,
                    None => f64::NAN,
                }
            })
            .collect();
        let matched = z_target.iter().filter(|z| !z.is_nan()).count();
        ElevationTargets { z_target, matched }
    }

    /// Sum of squared residuals over matched surfels (unmatched surfels
    /// contribute zero), with d(loss)/dz per surfel.
    pub fn evaluate(&self, scene: &SurfelScene) -> (f64, Vec<f64>) {
        let mut loss = 0.0;
        let mut grad = vec![0.0; scene.len()];
        for i in 0..scene.len() {
            let zt = self.z_target[i];
            if zt.is_nan() {
                continue;
            }
            let d = scene.z[i] - zt;
            loss += d * d;
            grad[i] = 2.0 * d;
        }
        (loss, grad)
    }
}

/// One-call elevation supervision: build targets, evaluate.
pub fn elevation_loss(scene: &SurfelScene, cloud: &PointCloud, radius: f64) -> (f64, Vec<f64>) {
    ElevationTargets::build(scene, cloud, radius).evaluate(scene)
}

/// Loss components of one step; `elevation` is `None` when LiDAR
/// supervision is off.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub color: f64,
    pub semantic: f64,
    pub smooth: f64,
    pub elevation: Option<f64>,
}

/// Weighted total per the training objective. The elevation term enters
/// only when supervision is active.
pub fn total_loss(parts: &LossParts, weights: &LossWeights, step: u64) -> Result<f64> {
    for (name, value) in [
        ("color", parts.color),
        ("semantic", parts.semantic),
        ("smooth", parts.smooth),
        ("elevation", parts.elevation.unwrap_or(0.0)),
    ] {
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                component: name,
                value,
            });
        }
    }
    Ok(weights.lambda_c * parts.color
        + weights.lambda_s * parts.semantic
        + weights.lambda_smooth * parts.smooth
        + parts
            .elevation
            .map(|e| weights.lambda_z * e)
            .unwrap_or(0.0))
}
