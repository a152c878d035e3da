//! Rigid transforms, camera models and image buffers.
//!
//! Conventions used throughout the crate:
//! - world frame: z-up, meters;
//! - vehicle frame: x-forward, y-left, z-up, origin at the rear-axle ground point;
//! - camera frame: z-forward, x-right, y-down;
//! - pixel (row, col) samples the continuous image point (u, v) = (col, row).

use nalgebra::{Matrix2x3, Matrix3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

/// Near-plane distance for perspective culling, meters. Road surfels never
/// legitimately come closer to a mounted camera than this.
pub const NEAR_PLANE: f64 = 0.1;

/// An SE(3) pose: `p_parent = rotation * p_local + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// Capture time in seconds, for nearest-frame association. Not part of the transform.
    pub timestamp: Option<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            timestamp: None,
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
            timestamp: None,
        }
    }

    pub fn from_quaternion(q: [f64; 4], translation: Vector3<f64>) -> Self {
        let quat = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            q[0], q[1], q[2], q[3],
        ));
        Pose {
            rotation: quat.to_rotation_matrix().into_inner(),
            translation,
            timestamp: None,
        }
    }

    pub fn with_timestamp(mut self, t: f64) -> Self {
        self.timestamp = Some(t);
        self
    }

    /// Third column of the rotation: the local up axis expressed in the parent frame.
    pub fn up_axis(&self) -> Vector3<f64> {
        self.rotation.column(2).into_owned()
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
            timestamp: self.timestamp,
        }
    }

    /// `self` then `other` as chained frames: result maps other-local points to self's parent.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
            timestamp: self.timestamp,
        }
    }

    /// Orthonormality check: `R^T R = I` and `det R = +1`, both within `tol`.
    pub fn rotation_is_orthonormal(&self, tol: f64) -> bool {
        let rtr = self.rotation.transpose() * self.rotation;
        let dev = (rtr - Matrix3::identity()).abs().max();
        dev <= tol && (self.rotation.determinant() - 1.0).abs() <= tol
    }
}

/// Perspective or orthographic projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CameraKind {
    Perspective,
    Orthographic,
}

/// Pinhole (or orthographic) camera with a learnable exposure pair.
#[derive(Debug, Clone)]
pub struct CameraModel {
    pub name: String,
    pub kind: CameraKind,
    /// Focal lengths in pixels (perspective only).
    pub fx: f64,
    pub fy: f64,
    /// Principal point in pixels.
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Camera pose in the vehicle frame.
    pub extrinsic: Pose,
    /// Meters per pixel (orthographic only).
    pub ortho_scale: f64,
    /// Log-gain of the affine exposure model `e^a * c + b`.
    pub exposure_a: f64,
    /// Bias of the affine exposure model.
    pub exposure_b: f64,
}

impl CameraModel {
    pub fn perspective(
        name: impl Into<String>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        extrinsic: Pose,
    ) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        CameraModel {
            name: name.into(),
            kind: CameraKind::Perspective,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            extrinsic,
            ortho_scale: 0.0,
            exposure_a: 0.0,
            exposure_b: 0.0,
        }
    }

    pub fn orthographic(
        name: impl Into<String>,
        ortho_scale: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        extrinsic: Pose,
    ) -> Self {
        assert!(ortho_scale > 0.0, "ortho_scale must be positive");
        CameraModel {
            name: name.into(),
            kind: CameraKind::Orthographic,
            fx: 0.0,
            fy: 0.0,
            cx,
            cy,
            width,
            height,
            extrinsic,
            ortho_scale,
            exposure_a: 0.0,
            exposure_b: 0.0,
        }
    }

    /// Apply the affine exposure model to one channel value (pre-clamp).
    #[inline]
    pub fn expose(&self, c: f64) -> f64 {
        self.exposure_a.exp() * c + self.exposure_b
    }
}

/// World-to-camera transform for a camera mounted on a posed vehicle.
///
/// The camera pose in world is `pose_vehicle ∘ cam.extrinsic`; this returns its
/// inverse, the `W` used for both point and covariance propagation.
pub fn world_to_camera_transform(pose_vehicle: &Pose, cam: &CameraModel) -> Pose {
    pose_vehicle.compose(&cam.extrinsic).inverse()
}

/// Transform a world point into the camera frame of `cam` on vehicle `pose_vehicle`.
pub fn world_to_camera(pose_vehicle: &Pose, cam: &CameraModel, p_world: &Vector3<f64>) -> Vector3<f64> {
    world_to_camera_transform(pose_vehicle, cam).transform_point(p_world)
}

/// Result of projecting a camera-frame point onto the image plane.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    /// Sort key for compositing: ascending = front to back.
    pub depth: f64,
    /// Jacobian of (u, v) with respect to camera-frame coordinates at the point.
    pub jacobian: Matrix2x3<f64>,
}

/// Pinhole projection with its analytic Jacobian.
pub fn project_perspective(cam: &CameraModel, p_cam: &Vector3<f64>) -> Result<Projection> {
    let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
    if z <= NEAR_PLANE {
        return Err(Error::BehindCamera { z, near: NEAR_PLANE });
    }
    let inv_z = 1.0 / z;
    let u = cam.fx * x * inv_z + cam.cx;
    let v = cam.fy * y * inv_z + cam.cy;
    let jacobian = Matrix2x3::new(
        cam.fx * inv_z,
        0.0,
        -cam.fx * x * inv_z * inv_z,
        0.0,
        cam.fy * inv_z,
        -cam.fy * y * inv_z * inv_z,
    );
    Ok(Projection {
        u,
        v,
        depth: z,
        jacobian,
    })
}

/// Orthographic projection. The camera looks along -z of its own frame, so
/// smaller `-z` means closer; `depth = -z` keeps ascending-order compositing.
///
/// The Jacobian is the identity scaled by 1/ortho_scale: the meters-per-pixel
/// factor folded into the otherwise unit mapping.
pub fn project_orthographic(cam: &CameraModel, p_cam: &Vector3<f64>) -> Projection {
    let s_inv = 1.0 / cam.ortho_scale;
    Projection {
        u: p_cam.x * s_inv + cam.cx,
        v: p_cam.y * s_inv + cam.cy,
        depth: -p_cam.z,
        jacobian: Matrix2x3::new(s_inv, 0.0, 0.0, 0.0, s_inv, 0.0),
    }
}

/// Project through whichever model the camera uses.
pub fn project(cam: &CameraModel, p_cam: &Vector3<f64>) -> Result<Projection> {
    match cam.kind {
        CameraKind::Perspective => project_perspective(cam, p_cam),
        CameraKind::Orthographic => Ok(project_orthographic(cam, p_cam)),
    }
}

/// RGB image, class-id map and road-validity mask on one shared pixel grid.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub width: usize,
    pub height: usize,
    /// Row-major H*W*3, values in [0, 1].
    pub rgb: Vec<f64>,
    /// Row-major H*W class ids.
    pub labels: Vec<u8>,
    /// Row-major H*W; true = pixel participates in losses.
    pub mask: Vec<bool>,
    pub camera_id: usize,
    pub pose_id: usize,
}

impl LabeledImage {
    pub fn new(width: usize, height: usize, camera_id: usize, pose_id: usize) -> Self {
        LabeledImage {
            width,
            height,
            rgb: vec![0.0; width * height * 3],
            labels: vec![0; width * height],
            mask: vec![false; width * height],
            camera_id,
            pose_id,
        }
    }

    /// Derive the mask from the labels and a road-class whitelist.
    pub fn mask_from_labels(&mut self, road_classes: &[u8]) {
        for (m, l) in self.mask.iter_mut().zip(self.labels.iter()) {
            *m = road_classes.contains(l);
        }
    }

    #[inline]
    pub fn pixel_index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// A 3D point set with optional per-point color and class labels.
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    /// World-frame xyz unless documented otherwise by the producer.
    pub points: Vec<Vector3<f64>>,
    pub colors: Option<Vec<Vector3<f64>>>,
    pub labels: Option<Vec<u8>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Consistency check on optional attribute lengths.
    pub fn validate(&self) -> Result<()> {
        if let Some(c) = &self.colors {
            if c.len() != self.points.len() {
                return Err(Error::InvalidSceneDir(format!(
                    "point cloud has {} points but {} colors",
                    self.points.len(),
                    c.len()
                )));
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != self.points.len() {
                return Err(Error::InvalidSceneDir(format!(
                    "point cloud has {} points but {} labels",
                    self.points.len(),
                    l.len()
                )));
            }
        }
        Ok(())
    }
}
