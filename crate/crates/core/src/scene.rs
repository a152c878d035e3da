//! The meshgrid of Gaussian surfels: layout construction, the pixel-index
//! lattice used for constant-time neighbor queries, and per-surfel covariance.
//!
//! Surfels live on a uniform square lattice over the road's xy extent. Their
//! xy centers are fixed by the lattice; only elevation and appearance are
//! learnable. Scales and opacity are stored unconstrained (log / logit) and
//! activated in the forward pass.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::Pose;

/// Sentinel for lattice cells holding no surfel.
pub const EMPTY_CELL: u32 = u32::MAX;

/// Opacity ceiling; keeps `1 - alpha` bounded away from zero in compositing.
pub const ALPHA_MAX: f64 = 1.0 - 1e-7;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Surfel placement pattern.
///
/// `One` places a surfel at every masked lattice vertex. `Two` additionally
/// places one at the center of every cell whose four corners are all masked
/// (a quincunx arrangement, roughly doubling the count on dense masks).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    One,
    Two,
}

/// Up/down/left/right in lattice (image) coordinates: up = previous row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Up,
        Direction::Down,
        Direction::Left,
        Direction::Right,
    ];

    #[inline]
    fn offset(self) -> (i64, i64) {
        match self {
            Direction::Up => (-1, 0),
            Direction::Down => (1, 0),
            Direction::Left => (0, -1),
            Direction::Right => (0, 1),
        }
    }
}

/// One semantic class: id, name and display color.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDef {
    pub id: u8,
    pub name: String,
    pub color: [u8; 3],
}

/// A single Gaussian surfel with activations applied, materialized from the
/// scene's column storage.
#[derive(Debug, Clone)]
pub struct GaussianSurfel {
    pub center: Vector3<f64>,
    pub color: [f64; 3],
    /// Activated scales (s_x, s_y) in meters; s_z is identically zero.
    pub scale: [f64; 2],
    pub opacity: f64,
    /// Unit quaternion, wxyz.
    pub rotation: [f64; 4],
    pub semantics: Vec<f64>,
}

/// Rotation matrix from a (not necessarily unit) wxyz quaternion, normalizing first.
pub fn quat_to_rotation(q: &[f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Rank-2 world covariance of a surfel: R diag(s_x^2, s_y^2, 0) R^T.
pub fn covariance_3d(surfel: &GaussianSurfel) -> Matrix3<f64> {
    let r = quat_to_rotation(&surfel.rotation);
    let m = Matrix3::from_diagonal(&Vector3::new(
        surfel.scale[0] * surfel.scale[0],
        surfel.scale[1] * surfel.scale[1],
        0.0,
    ));
    r * m * r.transpose()
}

/// The meshgrid scene: column storage for all learnable surfel parameters,
/// plus the lattice metadata shared by the rasterizer and the losses.
#[derive(Debug, Clone)]
pub struct SurfelScene {
    /// World xy of each surfel center; fixed after construction.
    pub xy: Vec<[f64; 2]>,
    /// Learnable elevation per surfel.
    pub z: Vec<f64>,
    /// Unconstrained log of (s_x, s_y).
    pub log_scale: Vec<[f64; 2]>,
    /// Unconstrained opacity; activated through a sigmoid.
    pub opacity_logit: Vec<f64>,
    /// wxyz quaternion, renormalized after every optimizer step.
    pub quat: Vec<[f64; 4]>,
    /// RGB in [0, 1].
    pub color: Vec<[f64; 3]>,
    /// Flat N * class_count semantic logits.
    pub sem: Vec<f64>,

    /// World position of lattice vertex (0, 0).
    pub grid_origin: [f64; 2],
    /// Meters per lattice cell.
    pub grid_resolution: f64,
    /// Lattice rows (y direction) and columns (x direction), counted in vertices.
    pub rows: usize,
    pub cols: usize,
    /// Row-major rows*cols map: vertex cell -> surfel index or EMPTY_CELL.
    pub lattice: Vec<u32>,
    /// Road mask on the vertex lattice.
    pub road_mask: Vec<bool>,
    /// Row-major (rows-1)*(cols-1) map for Layout-2 cell-center surfels.
    pub center_lattice: Vec<u32>,
    /// Surfels [0, vertex_count) sit on vertices; the rest are cell centers.
    pub vertex_count: usize,

    pub layout: Layout,
    pub class_count: usize,
    pub palette: Vec<ClassDef>,
}

impl SurfelScene {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    #[inline]
    pub fn scale(&self, i: usize) -> [f64; 2] {
        [self.log_scale[i][0].exp(), self.log_scale[i][1].exp()]
    }

    #[inline]
    pub fn alpha(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logit[i]).min(ALPHA_MAX)
    }

    #[inline]
    pub fn center(&self, i: usize) -> Vector3<f64> {
        Vector3::new(self.xy[i][0], self.xy[i][1], self.z[i])
    }

    pub fn sem_slice(&self, i: usize) -> &[f64] {
        &self.sem[i * self.class_count..(i + 1) * self.class_count]
    }

    /// Materialize one surfel with activations applied.
    pub fn surfel(&self, i: usize) -> GaussianSurfel {
        GaussianSurfel {
            center: self.center(i),
            color: self.color[i],
            scale: self.scale(i),
            opacity: self.alpha(i),
            rotation: self.quat[i],
            semantics: self.sem_slice(i).to_vec(),
        }
    }

    /// Nearest lattice vertex of a world xy position.
    #[inline]
    pub fn cell_of(&self, x: f64, y: f64) -> (i64, i64) {
        let c = ((x - self.grid_origin[0]) / self.grid_resolution).round() as i64;
        let r = ((y - self.grid_origin[1]) / self.grid_resolution).round() as i64;
        (r, c)
    }

    /// World position of a vertex cell.
    #[inline]
    pub fn vertex_position(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.grid_origin[0] + col as f64 * self.grid_resolution,
            self.grid_origin[1] + row as f64 * self.grid_resolution,
        ]
    }

    /// Scene xy extent in meters (vertex span).
    pub fn extent(&self) -> (f64, f64) {
        (
            (self.cols - 1) as f64 * self.grid_resolution,
            (self.rows - 1) as f64 * self.grid_resolution,
        )
    }

    /// For each surfel, the index of its neighbor in `direction`, or its own
    /// index when the neighbor cell is off the road mask or out of bounds.
    /// Vertex surfels look up the vertex lattice, center surfels the center
    /// lattice, so smoothness couples each sublattice to itself.
    pub fn neighbor_indices(&self, direction: Direction) -> Vec<u32> {
        let (dr, dc) = direction.offset();
        let mut out = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let (lattice, rows, cols, origin_shift) = if i < self.vertex_count {
                (&self.lattice, self.rows, self.cols, 0.0)
            } else {
                (&self.center_lattice, self.rows - 1, self.cols - 1, 0.5)
            };
            let x = self.xy[i][0];
            let y = self.xy[i][1];
            let c = ((x - self.grid_origin[0]) / self.grid_resolution - origin_shift).round() as i64;
            let r = ((y - self.grid_origin[1]) / self.grid_resolution - origin_shift).round() as i64;
            let (nr, nc) = (r + dr, c + dc);
            let idx = if nr >= 0 && nc >= 0 && (nr as usize) < rows && (nc as usize) < cols {
                let cand = lattice[nr as usize * cols + nc as usize];
                if cand == EMPTY_CELL {
                    i as u32
                } else {
                    cand
                }
            } else {
                i as u32
            };
            out.push(idx);
        }
        out
    }

    /// All four directional neighbor arrays in `Direction::ALL` order.
    pub fn neighbor_tables(&self) -> [Vec<u32>; 4] {
        [
            self.neighbor_indices(Direction::Up),
            self.neighbor_indices(Direction::Down),
            self.neighbor_indices(Direction::Left),
            self.neighbor_indices(Direction::Right),
        ]
    }
}

/// Build the surfel meshgrid from the vehicle trajectory.
///
/// The pose xy bounding box is expanded by `expand` meters per side,
/// discretized at `resolution` (origin snapped to a multiple of the
/// resolution so independently-built rasters align cell-for-cell), the
/// trajectory polyline is rasterized onto the lattice, and the mask is the
/// Euclidean dilation of the trajectory cells by ceil(expand/resolution)
/// cells.
pub fn build_layout(
    poses: &[Pose],
    resolution: f64,
    expand: f64,
    layout: Layout,
    palette: Vec<ClassDef>,
) -> Result<SurfelScene> {
    assert!(resolution > 0.0, "resolution must be positive");
    assert!(expand >= 0.0, "expand must be non-negative");
    if poses.is_empty() {
        return Err(Error::EmptyScene);
    }

    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in poses {
        min_x = min_x.min(p.translation.x);
        max_x = max_x.max(p.translation.x);
        min_y = min_y.min(p.translation.y);
        max_y = max_y.max(p.translation.y);
    }
    let width = max_x - min_x + 2.0 * expand;
    let height = max_y - min_y + 2.0 * expand;
    if width < resolution || height < resolution {
        return Err(Error::DegenerateExtent {
            width,
            height,
            resolution,
        });
    }

    let x0 = ((min_x - expand) / resolution).floor() * resolution;
    let y0 = ((min_y - expand) / resolution).floor() * resolution;
    let cols = (((max_x + expand) - x0) / resolution).ceil() as usize + 1;
    let rows = (((max_y + expand) - y0) / resolution).ceil() as usize + 1;

    // Trajectory cells: every vertex nearest to a sample along the polyline.
    let mut marked = vec![false; rows * cols];
    let mut mark = |x: f64, y: f64| {
        let c = ((x - x0) / resolution).round() as i64;
        let r = ((y - y0) / resolution).round() as i64;
        if r >= 0 && c >= 0 && (r as usize) < rows && (c as usize) < cols {
            marked[r as usize * cols + c as usize] = true;
        }
    };
    for w in poses.windows(2) {
        let a = &w[0].translation;
        let b = &w[1].translation;
        let seg = ((b.x - a.x).powi(2) + (b.y - a.y).powi(2)).sqrt();
        let steps = (seg / (resolution * 0.5)).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            mark(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y));
        }
    }
    mark(poses[0].translation.x, poses[0].translation.y);

    let dilate_cells = (expand / resolution).ceil() as i64;
    let road_mask = dilate_mask(&marked, rows, cols, dilate_cells);

    let class_count = palette.len().max(1);
    let mut scene = SurfelScene {
        xy: Vec::new(),
        z: Vec::new(),
        log_scale: Vec::new(),
        opacity_logit: Vec::new(),
        quat: Vec::new(),
        color: Vec::new(),
        sem: Vec::new(),
        grid_origin: [x0, y0],
        grid_resolution: resolution,
        rows,
        cols,
        lattice: vec![EMPTY_CELL; rows * cols],
        road_mask,
        center_lattice: vec![EMPTY_CELL; (rows - 1) * (cols - 1)],
        vertex_count: 0,
        layout,
        class_count,
        palette,
    };

    let push_surfel = |scene: &mut SurfelScene, x: f64, y: f64| -> u32 {
        let idx = scene.xy.len() as u32;
        scene.xy.push([x, y]);
        scene.z.push(0.0);
        scene.log_scale.push([resolution.ln(), resolution.ln()]);
        scene.opacity_logit.push(logit(0.9));
        scene.quat.push([1.0, 0.0, 0.0, 0.0]);
        scene.color.push([0.5, 0.5, 0.5]);
        scene.sem.extend(std::iter::repeat(0.0).take(class_count));
        idx
    };

    for r in 0..rows {
        for c in 0..cols {
            if scene.road_mask[r * cols + c] {
                let [x, y] = scene.vertex_position(r, c);
                let idx = push_surfel(&mut scene, x, y);
                scene.lattice[r * cols + c] = idx;
            }
        }
    }
    scene.vertex_count = scene.xy.len();

    if layout == Layout::Two {
        for r in 0..rows - 1 {
            for c in 0..cols - 1 {
                let corners = [
                    scene.road_mask[r * cols + c],
                    scene.road_mask[r * cols + c + 1],
                    scene.road_mask[(r + 1) * cols + c],
                    scene.road_mask[(r + 1) * cols + c + 1],
                ];
                if corners.iter().all(|m| *m) {
                    let x = x0 + (c as f64 + 0.5) * resolution;
                    let y = y0 + (r as f64 + 0.5) * resolution;
                    let idx = push_surfel(&mut scene, x, y);
                    scene.center_lattice[r * (cols - 1) + c] = idx;
                }
            }
        }
    }

    Ok(scene)
}

/// Binary dilation by a Euclidean disk of `radius` cells, via an exact
/// integer two-pass distance transform (Meijster). Exactness matters: the
/// mask boundary must match a brute-force disk dilation cell-for-cell.
pub fn dilate_mask(marked: &[bool], rows: usize, cols: usize, radius: i64) -> Vec<bool> {
    if radius <= 0 {
        return marked.to_vec();
    }
    let inf = (rows + cols + 1) as i64;

    // Phase 1: per-column vertical distances to the nearest marked cell.
    let mut g = vec![inf; rows * cols];
    for c in 0..cols {
        if marked[c] {
            g[c] = 0;
        }
        for r in 1..rows {
            let i = r * cols + c;
            g[i] = if marked[i] { 0 } else { g[i - cols] + 1 };
        }
        for r in (0..rows - 1).rev() {
            let i = r * cols + c;
            if g[i + cols] + 1 < g[i] {
                g[i] = g[i + cols] + 1;
            }
        }
    }

    // Phase 2: per-row lower envelope of parabolas, all-integer arithmetic.
    let r2 = radius * radius;
    let mut out = vec![false; rows * cols];
    let mut s = vec![0i64; cols];
    let mut t = vec![0i64; cols];
    for r in 0..rows {
        let row = &g[r * cols..(r + 1) * cols];
        let f = |i: i64| -> i64 {
            let gi = row[i as usize];
            gi * gi
        };
        let sep = |i: i64, u: i64| -> i64 { (u * u - i * i + f(u) - f(i)).div_euclid(2 * (u - i)) };
        let mut q: i64 = 0;
        s[0] = 0;
        t[0] = 0;
        for u in 1..cols as i64 {
            while q >= 0 {
                let d_t = t[q as usize] - s[q as usize];
                let d_u = t[q as usize] - u;
                if d_t * d_t + f(s[q as usize]) > d_u * d_u + f(u) {
                    q -= 1;
                } else {
                    break;
                }
            }
            if q < 0 {
                q = 0;
                s[0] = u;
                t[0] = 0;
            } else {
                let w = 1 + sep(s[q as usize], u);
                if w < cols as i64 {
                    q += 1;
                    s[q as usize] = u;
                    t[q as usize] = w;
                }
            }
        }
        for u in (0..cols as i64).rev() {
            let d = u - s[q as usize];
            let dist2 = d * d + f(s[q as usize]);
            out[r * cols + u as usize] = dist2 <= r2;
            if q > 0 && u == t[q as usize] {
                q -= 1;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn test_palette() -> Vec<ClassDef> {
        vec![
            ClassDef {
                id: 0,
                name: "void".into(),
                color: [0, 0, 0],
            },
            ClassDef {
                id: 1,
                name: "road".into(),
                color: [128, 128, 128],
            },
        ]
    }

    fn straight_poses(length: f64, step: f64) -> Vec<Pose> {
        let n = (length / step) as usize;
        (0..=n)
            .map(|i| {
                Pose::new(
                    Matrix3::identity(),
                    Vector3::new(i as f64 * step, 0.0, 0.0),
                )
            })
            .collect()
    }

    /// Brute-force disk dilation, the independent oracle for the transform.
    fn dilate_brute(marked: &[bool], rows: usize, cols: usize, radius: i64) -> Vec<bool> {
        let mut out = vec![false; rows * cols];
        let sites: Vec<(i64, i64)> = (0..rows * cols)
            .filter(|i| marked[*i])
            .map(|i| ((i / cols) as i64, (i % cols) as i64))
            .collect();
        for r in 0..rows as i64 {
            for c in 0..cols as i64 {
                let hit = sites
                    .iter()
                    .any(|(sr, sc)| (r - sr) * (r - sr) + (c - sc) * (c - sc) <= radius * radius);
                out[r as usize * cols + c as usize] = hit;
            }
        }
        out
    }

    #[test]
    fn dilation_matches_brute_force() {
        let mut rng = StdRng::seed_from_u64(42);
        for _ in 0..20 {
            let rows = rng.gen_range(4..40);
            let cols = rng.gen_range(4..40);
            let mut marked = vec![false; rows * cols];
            for _ in 0..rng.gen_range(1..8) {
                let i = rng.gen_range(0..rows * cols);
                marked[i] = true;
            }
            let radius = rng.gen_range(0..12);
            assert_eq!(
                dilate_mask(&marked, rows, cols, radius),
                dilate_brute(&marked, rows, cols, radius),
                "rows={rows} cols={cols} radius={radius}"
            );
        }
    }

    #[test]
    fn straight_trajectory_layout_dimensions_and_count() {
        let poses = straight_poses(100.0, 1.0);
        let scene = build_layout(&poses, 0.05, 10.0, Layout::One, test_palette()).unwrap();
        // 120 m x 20 m extent at 0.05 m cells.
        assert_eq!(scene.cols, 2401);
        assert_eq!(scene.rows, 401);
        let mask_count = scene.road_mask.iter().filter(|m| **m).count();
        assert_eq!(scene.len(), mask_count);
        assert!(mask_count > 0);

        // Independent rasterization of the same definition.
        let mut marked = vec![false; scene.rows * scene.cols];
        for p in &poses {
            let (r, c) = scene.cell_of(p.translation.x, p.translation.y);
            marked[r as usize * scene.cols + c as usize] = true;
        }
        // Poses are 1 m apart: fill segment samples exactly like the builder.
        for w in poses.windows(2) {
            let (a, b) = (&w[0].translation, &w[1].translation);
            let steps = ((b - a).norm() / 0.025).ceil() as usize;
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let (r, c) = scene.cell_of(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y));
                marked[r as usize * scene.cols + c as usize] = true;
            }
        }
        let expect = dilate_mask(&marked, scene.rows, scene.cols, 200);
        let expect_count = expect.iter().filter(|m| **m).count();
        assert_eq!(mask_count, expect_count);
    }

    #[test]
    fn single_pose_needs_expand() {
        let pose = vec![Pose::identity()];
        let r = build_layout(&pose, 0.05, 0.0, Layout::One, test_palette());
        assert!(matches!(r, Err(Error::DegenerateExtent { .. })));
        let ok = build_layout(&pose, 0.05, 1.0, Layout::One, test_palette());
        assert!(ok.is_ok());
    }

    #[test]
    fn empty_poses_error() {
        assert!(matches!(
            build_layout(&[], 0.05, 1.0, Layout::One, test_palette()),
            Err(Error::EmptyScene)
        ));
    }

    #[test]
    fn layout_two_roughly_doubles_count() {
        let poses = straight_poses(5.0, 0.5);
        let one = build_layout(&poses, 0.25, 2.0, Layout::One, test_palette()).unwrap();
        let two = build_layout(&poses, 0.25, 2.0, Layout::Two, test_palette()).unwrap();
        assert!(one.len() < two.len());

        // Combinatorial oracle: centers = cells whose 4 corners are masked.
        let mut centers = 0usize;
        for r in 0..one.rows - 1 {
            for c in 0..one.cols - 1 {
                if one.road_mask[r * one.cols + c]
                    && one.road_mask[r * one.cols + c + 1]
                    && one.road_mask[(r + 1) * one.cols + c]
                    && one.road_mask[(r + 1) * one.cols + c + 1]
                {
                    centers += 1;
                }
            }
        }
        assert_eq!(two.len(), one.len() + centers);
        let ratio = two.len() as f64 / one.len() as f64;
        assert!(ratio > 1.8 && ratio < 2.1, "ratio = {ratio}");
    }

    #[test]
    fn lattice_bijection_after_build() {
        let poses = straight_poses(10.0, 1.0);
        let scene = build_layout(&poses, 0.2, 2.0, Layout::One, test_palette()).unwrap();
        for i in 0..scene.len() {
            let (r, c) = scene.cell_of(scene.xy[i][0], scene.xy[i][1]);
            assert_eq!(scene.lattice[r as usize * scene.cols + c as usize], i as u32);
        }
    }

    #[test]
    fn initial_surfel_state() {
        let poses = straight_poses(4.0, 1.0);
        let scene = build_layout(&poses, 0.5, 1.0, Layout::One, test_palette()).unwrap();
        let s = scene.surfel(0);
        assert_relative_eq!(s.opacity, 0.9, epsilon = 1e-12);
        assert_relative_eq!(s.scale[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(s.scale[1], 0.5, epsilon = 1e-12);
        assert_eq!(s.color, [0.5, 0.5, 0.5]);
        assert_eq!(s.rotation, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(s.semantics.len(), 2);
        assert_eq!(s.center.z, 0.0);
    }

    #[test]
    fn covariance_axis_aligned() {
        let s = GaussianSurfel {
            center: Vector3::zeros(),
            color: [0.5; 3],
            scale: [2.0, 3.0],
            opacity: 0.9,
            rotation: [1.0, 0.0, 0.0, 0.0],
            semantics: vec![],
        };
        let sigma = covariance_3d(&s);
        let expected = Matrix3::from_diagonal(&Vector3::new(4.0, 9.0, 0.0));
        assert_relative_eq!(sigma, expected, epsilon = 1e-12);
    }

    #[test]
    fn covariance_90_degree_yaw_swaps_axes() {
        // 90 degrees about z: w = cos(45), z = sin(45).
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let s = GaussianSurfel {
            center: Vector3::zeros(),
            color: [0.5; 3],
            scale: [2.0, 3.0],
            opacity: 0.9,
            rotation: [h, 0.0, 0.0, h],
            semantics: vec![],
        };
        let sigma = covariance_3d(&s);
        let expected = Matrix3::from_diagonal(&Vector3::new(9.0, 4.0, 0.0));
        assert_relative_eq!(sigma, expected, epsilon = 1e-9);
    }

    #[test]
    fn covariance_eigenvalues_are_scales_squared_and_zero() {
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..100 {
            let q = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let sx: f64 = rng.gen_range(0.1..3.0);
            let sy: f64 = rng.gen_range(0.1..3.0);
            let s = GaussianSurfel {
                center: Vector3::zeros(),
                color: [0.5; 3],
                scale: [sx, sy],
                opacity: 0.9,
                rotation: q,
                semantics: vec![],
            };
            let sigma = covariance_3d(&s);
            assert_relative_eq!(sigma, sigma.transpose(), epsilon = 1e-12);
            let mut eig: Vec<f64> = sigma.symmetric_eigenvalues().iter().copied().collect();
            eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut expect = [0.0, sx * sx, sy * sy];
            expect.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (e, x) in eig.iter().zip(expect.iter()) {
                assert!((e - x).abs() < 1e-9, "eig {e} vs {x}");
            }
            assert!(eig[0].abs() < 1e-12, "rank-2 violated: {}", eig[0]);
        }
    }

    #[test]
    fn neighbors_dense_interior() {
        let poses = vec![
            Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 0.0)),
            Pose::new(Matrix3::identity(), Vector3::new(2.0, 2.0, 0.0)),
        ];
        let scene = build_layout(&poses, 1.0, 2.0, Layout::One, test_palette()).unwrap();
        // The 3x3 block around the trajectory midpoint is fully masked; the
        // center surfel's Up neighbor is the cell directly above it.
        let (r, c) = scene.cell_of(1.0, 1.0);
        let (r, c) = (r as usize, c as usize);
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let idx = (r as i64 + dr) as usize * scene.cols + (c as i64 + dc) as usize;
                assert!(scene.road_mask[idx]);
            }
        }
        let center = scene.lattice[r * scene.cols + c] as usize;
        let up = scene.neighbor_indices(Direction::Up);
        assert_eq!(up[center], scene.lattice[(r - 1) * scene.cols + c]);
    }

    #[test]
    fn out_of_mask_neighbor_maps_to_self() {
        let poses = straight_poses(6.0, 1.0);
        let scene = build_layout(&poses, 1.0, 1.0, Layout::One, test_palette()).unwrap();
        // Top row of the mask: the Up neighbor is out of mask or out of bounds.
        let up = scene.neighbor_indices(Direction::Up);
        let mut saw_self = false;
        for i in 0..scene.len() {
            let (r, c) = scene.cell_of(scene.xy[i][0], scene.xy[i][1]);
            let above_masked = r > 0
                && scene.road_mask[(r - 1) as usize * scene.cols + c as usize];
            if !above_masked {
                assert_eq!(up[i], i as u32);
                saw_self = true;
            }
        }
        assert!(saw_self, "test mask unexpectedly had no boundary");
    }

    #[test]
    fn neighbors_match_brute_force_on_random_masks() {
        let mut rng = StdRng::seed_from_u64(1234);
        for _ in 0..10 {
            let n = rng.gen_range(3..12);
            let poses: Vec<Pose> = (0..n)
                .map(|_| {
                    Pose::new(
                        Matrix3::identity(),
                        Vector3::new(rng.gen_range(0.0..8.0), rng.gen_range(0.0..8.0), 0.0),
                    )
                })
                .collect();
            let scene = build_layout(&poses, 0.5, 1.0, Layout::Two, test_palette()).unwrap();
            for dir in Direction::ALL {
                let fast = scene.neighbor_indices(dir);
                let (dr, dc) = dir.offset();
                // O(N^2) oracle: find the surfel whose lattice coordinates are
                // exactly the adjacent cell, scanning all surfels.
                for i in 0..scene.len() {
                    let shift = if i < scene.vertex_count { 0.0 } else { 0.5 };
                    let res = scene.grid_resolution;
                    let r = ((scene.xy[i][1] - scene.grid_origin[1]) / res - shift).round() as i64;
                    let c = ((scene.xy[i][0] - scene.grid_origin[0]) / res - shift).round() as i64;
                    let want_r = r + dr;
                    let want_c = c + dc;
                    let mut found = i as u32;
                    for j in 0..scene.len() {
                        let same_class = (j < scene.vertex_count) == (i < scene.vertex_count);
                        if !same_class {
                            continue;
                        }
                        let rj =
                            ((scene.xy[j][1] - scene.grid_origin[1]) / res - shift).round() as i64;
                        let cj =
                            ((scene.xy[j][0] - scene.grid_origin[0]) / res - shift).round() as i64;
                        if rj == want_r && cj == want_c {
                            found = j as u32;
                            break;
                        }
                    }
                    assert_eq!(fast[i], found, "surfel {i} dir {dir:?}");
                }
            }
        }
    }
}
