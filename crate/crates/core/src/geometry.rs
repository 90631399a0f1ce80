//! Camera poses, quaternion conversion and pinhole intrinsics.
//!
//! Poses are similarity transforms (rotation, translation, scale) with
//! camera-to-world semantics: applying a pose maps camera-frame coordinates
//! into the world frame. The camera frame is +x right, +y down, +z forward.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("quaternion norm {norm} deviates from 1 by more than {max_dev}")]
    NonUnitQuaternion { norm: f64, max_dev: f64 },
    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Largest deviation of a quaternion norm from 1 that is silently renormalized.
pub const QUAT_NORM_TOLERANCE: f64 = 1e-2;

/// Converts a unit quaternion (w, x, y, z) to its 3x3 rotation matrix.
///
/// Inputs off unit norm by up to [`QUAT_NORM_TOLERANCE`] are renormalized;
/// anything farther is rejected as [`GeometryError::NonUnitQuaternion`].
pub fn quat_to_rotation(qw: f64, qx: f64, qy: f64, qz: f64) -> Result<Matrix3<f64>, GeometryError> {
    let norm = (qw * qw + qx * qx + qy * qy + qz * qz).sqrt();
    if !norm.is_finite() || (norm - 1.0).abs() > QUAT_NORM_TOLERANCE {
        return Err(GeometryError::NonUnitQuaternion {
            norm,
            max_dev: QUAT_NORM_TOLERANCE,
        });
    }
    let (w, x, y, z) = (qw / norm, qx / norm, qy / norm, qz / norm);
    Ok(Matrix3::new(
        w * w + x * x - y * y - z * z,
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        w * w - x * x + y * y - z * z,
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        w * w - x * x - y * y + z * z,
    ))
}

/// A Sim(3) camera pose: `p_world = scale * R * p_camera + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
    scale: f64,
}

impl CameraPose {
    /// Builds a pose from quaternion components (w, x, y, z), a translation and
    /// a scale. The quaternion is normalized; scale must be positive.
    pub fn new(
        quat_wxyz: [f64; 4],
        translation: Vector3<f64>,
        scale: f64,
    ) -> Result<Self, GeometryError> {
        let [w, x, y, z] = quat_wxyz;
        let q = Quaternion::new(w, x, y, z);
        let norm = q.norm();
        if !norm.is_finite() || norm <= 0.0 {
            return Err(GeometryError::NonUnitQuaternion {
                norm,
                max_dev: QUAT_NORM_TOLERANCE,
            });
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(GeometryError::NonPositiveScale(scale));
        }
        Ok(Self {
            rotation: UnitQuaternion::from_quaternion(q),
            translation,
            scale,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn from_parts(rotation: UnitQuaternion<f64>, translation: Vector3<f64>, scale: f64) -> Self {
        assert!(scale > 0.0, "pose scale must be positive");
        Self {
            rotation,
            translation,
            scale,
        }
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        self.rotation
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Rotation matrix of this pose, via the quaternion conversion above.
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let q = self.rotation.quaternion();
        // The stored quaternion is unit by construction.
        quat_to_rotation(q.w, q.i, q.j, q.k).expect("stored quaternion is unit")
    }

    /// Applies the pose to a point: `scale * R * p + t`.
    pub fn apply(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    /// Rotates a direction (ignores translation and scale).
    pub fn rotate(&self, v: Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Composition: `compose(a, b).apply(p) == a.apply(b.apply(p))`.
    pub fn compose(&self, other: &CameraPose) -> CameraPose {
        CameraPose {
            rotation: self.rotation * other.rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
            scale: self.scale * other.scale,
        }
    }

    /// Inverse pose: `a.inverse().apply(a.apply(p)) == p`.
    pub fn inverse(&self) -> CameraPose {
        let inv_rot = self.rotation.inverse();
        CameraPose {
            rotation: inv_rot,
            translation: -(inv_rot * self.translation) / self.scale,
            scale: 1.0 / self.scale,
        }
    }

    /// Same rotation and translation with the scale stripped to 1.
    ///
    /// Used once a keyframe's depth has been rescaled to metric units, after
    /// which world and camera frames relate by a rigid transform only.
    pub fn with_unit_scale(&self) -> CameraPose {
        CameraPose {
            rotation: self.rotation,
            translation: self.translation,
            scale: 1.0,
        }
    }
}

/// Pinhole camera intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if !(0.0 <= cx && cx < width as f64) || !(0.0 <= cy && cy < height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Back-projects pixel (u, v) at depth d to a camera-frame point.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// Projects a camera-frame point to continuous pixel coordinates.
    /// Returns `None` for points at or behind the camera plane.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Nearest-pixel projection, `None` when outside the image bounds.
    pub fn project_to_pixel(&self, p: &Vector3<f64>) -> Option<(usize, usize)> {
        let (u, v) = self.project(p)?;
        let px = u.round();
        let py = v.round();
        if px < 0.0 || py < 0.0 || px >= self.width as f64 || py >= self.height as f64 {
            return None;
        }
        Some((px as usize, py as usize))
    }
}
