//! Rigid-body algebra shared by every other module.
//!
//! Rotations use the fixed-axis X-Y-Z Euler convention: for angles
//! `(α, β, γ)` the matrix is `Rz(γ)·Ry(β)·Rx(α)`. Absolute camera poses are
//! stored camera-to-world; relative poses map frame-1 camera coordinates into
//! frame-2 camera coordinates.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance used when validating that a matrix is a rotation.
pub const ROTATION_TOL: f64 = 1e-6;

/// Rotation plus translation, `x ↦ R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a transform without checking the rotation.
    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Builds a transform, rejecting matrices that are not in SO(3).
    pub fn try_new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        check_rotation(&rotation)?;
        Ok(Self::new(rotation, translation))
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(Mat3::identity(), translation)
    }

    pub fn from_euler(angles: &Vec3, translation: Vec3) -> Self {
        Self::new(euler_to_rotation(angles), translation)
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self` composed with itself `k` times; `k = 0` is the identity.
    pub fn power(&self, k: usize) -> RigidTransform {
        (0..k).fold(RigidTransform::identity(), |acc, _| self.compose(&acc))
    }

    pub fn to_euler(&self) -> Result<EulerPose> {
        EulerPose::from_transform(self)
    }

    pub fn is_identity(&self, tol: f64) -> bool {
        (self.rotation - Mat3::identity()).amax() <= tol && self.translation.amax() <= tol
    }
}

/// A pose parameterized as fixed-axis X-Y-Z Euler angles (radians) plus a
/// translation. This is the 6-vector the pose regressor emits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EulerPose {
    pub angles: Vec3,
    pub translation: Vec3,
}

impl EulerPose {
    pub fn new(angles: Vec3, translation: Vec3) -> Self {
        Self {
            angles,
            translation,
        }
    }

    pub fn from_transform(t: &RigidTransform) -> Result<Self> {
        Ok(Self {
            angles: rotation_to_euler(&t.rotation)?,
            translation: t.translation,
        })
    }

    pub fn to_transform(&self) -> RigidTransform {
        RigidTransform::from_euler(&self.angles, self.translation)
    }

    pub fn as_array(&self) -> [f64; 6] {
        [
            self.angles.x,
            self.angles.y,
            self.angles.z,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ]
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "intrinsics need positive focal lengths, got fx={fx} fy={fy}"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            fx: 1000.0,
            fy: 1000.0,
            cx: 0.0,
            cy: 0.0,
        }
    }
}

pub fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// `Rz(γ)·Ry(β)·Rx(α)` for `angles = (α, β, γ)`.
pub fn euler_to_rotation(angles: &Vec3) -> Mat3 {
    rot_z(angles.z) * rot_y(angles.y) * rot_x(angles.x)
}

/// Inverse of [`euler_to_rotation`]. Pitch is taken from `atan2` rather than
/// `asin` so it stays well conditioned near ±π/2. At gimbal lock the roll is
/// pinned to zero.
pub fn rotation_to_euler(r: &Mat3) -> Result<Vec3> {
    check_rotation(r)?;
    let cos_pitch = r[(0, 0)].hypot(r[(1, 0)]);
    let pitch = (-r[(2, 0)]).atan2(cos_pitch);
    let (roll, yaw) = if cos_pitch < 1e-12 {
        (0.0, (-r[(0, 1)]).atan2(r[(1, 1)]))
    } else {
        (r[(2, 1)].atan2(r[(2, 2)]), r[(1, 0)].atan2(r[(0, 0)]))
    };
    Ok(Vec3::new(wrap_angle(roll), pitch, wrap_angle(yaw)))
}

/// Maps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Largest deviation from orthonormality / unit determinant.
pub fn rotation_deviation(r: &Mat3) -> f64 {
    let ortho = (r.transpose() * r - Mat3::identity()).norm();
    let det = (r.determinant() - 1.0).abs();
    ortho.max(det)
}

fn check_rotation(r: &Mat3) -> Result<()> {
    let deviation = rotation_deviation(r);
    if !deviation.is_finite() || deviation > ROTATION_TOL {
        return Err(Error::NonRotationMatrix { deviation });
    }
    Ok(())
}

/// Relative pose from camera-to-world poses: maps camera-1 coordinates into
/// camera-2 coordinates, `(R₂ᵀR₁, R₂ᵀ(t₁ − t₂))`.
pub fn relative_pose(pose1: &RigidTransform, pose2: &RigidTransform) -> RigidTransform {
    let r2t = pose2.rotation.transpose();
    RigidTransform {
        rotation: r2t * pose1.rotation,
        translation: r2t * (pose1.translation - pose2.translation),
    }
}

/// Geodesic angle between two rotations, in degrees.
///
/// Evaluated as `atan2(sin θ, cos θ)` with `cos θ = (tr(R̂ᵀR) − 1)/2` and
/// `sin θ` from the skew part, which equals the clamped `arccos` form but
/// keeps full precision near zero and π.
pub fn rotation_error_deg(r_hat: &Mat3, r_gt: &Mat3) -> f64 {
    let m = r_hat.transpose() * r_gt;
    let cos = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let skew = Vec3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    );
    let sin = (skew.norm() / 2.0).min(1.0);
    sin.atan2(cos).to_degrees()
}

pub fn translation_error(t_hat: &Vec3, t_gt: &Vec3) -> f64 {
    (t_hat - t_gt).norm()
}

/// Pinhole projection of a camera-frame point.
pub fn project(point: &Vec3, k: &CameraIntrinsics) -> Result<Vector2<f64>> {
    if point.z <= 1e-9 {
        return Err(Error::NonPositiveDepth { indices: vec![0] });
    }
    Ok(Vector2::new(
        k.fx * point.x / point.z + k.cx,
        k.fy * point.y / point.z + k.cy,
    ))
}
