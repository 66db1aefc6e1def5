//! SE(3) poses, pinhole projection and the pixel Jacobians used by the
//! pose solvers.
//!
//! Poses map world points into the camera frame: `x_cam = R * x_world + t`.
//! Pose updates are applied on the left, `exp(delta) * pose`, with the
//! tangent vector ordered as `(rho, omega)` (translation first).

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix2x3, Matrix2x6, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3, Vector6};
use thiserror::Error;

/// Tangent-space pose increment `(rho_x, rho_y, rho_z, omega_x, omega_y, omega_z)`.
pub type Tangent = Vector6<f64>;

/// Points closer than this to the image plane cannot be projected.
pub const Z_MIN: f64 = 1e-6;

const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("malformed pose text: {0}")]
    PoseParse(String),
}

/// Rigid world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation: renormalize(rotation), translation }
    }

    /// Builds a pose from a raw `(w, x, y, z)` quaternion, normalizing it.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64, translation: Vector3<f64>) -> Self {
        Self { rotation: UnitQuaternion::new_normalize(Quaternion::new(w, x, y, z)), translation }
    }

    pub fn from_rotation_matrix(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*rotation);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    /// Pose of a camera centred at `center` with the given world-to-camera rotation.
    pub fn from_center(rotation: UnitQuaternion<f64>, center: &Vector3<f64>) -> Self {
        let rotation = renormalize(rotation);
        Self { translation: -(rotation * center), rotation }
    }

    /// Camera at `eye` looking at `target`; image y points along -`up`.
    pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let mut x = z.cross(up);
        if x.norm() < 1e-9 {
            x = z.cross(&Vector3::new(1.0, 0.0, 0.0));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        // Rows of the world-to-camera rotation are the camera axes in world coordinates.
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let rot = nalgebra::Rotation3::from_matrix_unchecked(r);
        Self::from_center(UnitQuaternion::from_rotation_matrix(&rot), eye)
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Camera centre in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Exponential map of a tangent vector.
    pub fn exp(delta: &Tangent) -> Self {
        let rho = Vector3::new(delta[0], delta[1], delta[2]);
        let omega = Vector3::new(delta[3], delta[4], delta[5]);
        let theta_sq = omega.norm_squared();
        let theta = theta_sq.sqrt();
        let w = skew(&omega);
        let w2 = w * w;

        let (rotation, v) = if theta < SMALL_ANGLE {
            let q = Quaternion::new(
                1.0 - theta_sq / 8.0,
                0.5 * omega.x * (1.0 - theta_sq / 24.0),
                0.5 * omega.y * (1.0 - theta_sq / 24.0),
                0.5 * omega.z * (1.0 - theta_sq / 24.0),
            );
            let v = Matrix3::identity() + 0.5 * w + w2 / 6.0;
            (UnitQuaternion::new_normalize(q), v)
        } else {
            let (s, c) = theta.sin_cos();
            let half = 0.5 * theta;
            let k = half.sin() / theta;
            let q = Quaternion::new(half.cos(), k * omega.x, k * omega.y, k * omega.z);
            let v = Matrix3::identity() + ((1.0 - c) / theta_sq) * w + ((theta - s) / (theta_sq * theta)) * w2;
            (UnitQuaternion::new_normalize(q), v)
        };

        Self { rotation, translation: v * rho }
    }

    /// Logarithm map, the inverse of [`PoseSE3::exp`] for rotation angles below pi.
    pub fn log(&self) -> Tangent {
        let q = self.rotation.quaternion();
        let (qw, qv) = if q.w < 0.0 { (-q.w, -q.imag()) } else { (q.w, q.imag()) };
        let vnorm = qv.norm();
        let theta = 2.0 * vnorm.atan2(qw);
        let omega = if vnorm < 1e-300 { Vector3::zeros() } else { qv * (theta / vnorm) };
        let w = skew(&omega);
        let w2 = w * w;
        let v_inv = if theta < SMALL_ANGLE {
            Matrix3::identity() - 0.5 * w + w2 / 12.0
        } else {
            let (s, c) = theta.sin_cos();
            Matrix3::identity() - 0.5 * w + (1.0 - theta * s / (2.0 * (1.0 - c))) / (theta * theta) * w2
        };
        let rho = v_inv * self.translation;
        Tangent::new(rho.x, rho.y, rho.z, omega.x, omega.y, omega.z)
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: renormalize(self.rotation * other.rotation),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let inv = self.rotation.inverse();
        PoseSE3 { rotation: inv, translation: -(inv * self.translation) }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Left-multiplied update `exp(delta) * self`.
    pub fn retract(&self, delta: &Tangent) -> PoseSE3 {
        PoseSE3::exp(delta).compose(self)
    }
}

impl fmt::Display for PoseSE3 {
    /// `qw qx qy qz tx ty tz`, shortest round-trip decimal for every field.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.rotation.quaternion();
        let t = &self.translation;
        write!(f, "{:?} {:?} {:?} {:?} {:?} {:?} {:?}", q.w, q.i, q.j, q.k, t.x, t.y, t.z)
    }
}

impl FromStr for PoseSE3 {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let values = s
            .split_whitespace()
            .map(|tok| tok.parse::<f64>().map_err(|_| GeometryError::PoseParse(format!("bad number {tok:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if values.len() != 7 {
            return Err(GeometryError::PoseParse(format!("expected 7 values, found {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::PoseParse("non-finite value".into()));
        }
        let q = Quaternion::new(values[0], values[1], values[2], values[3]);
        if q.norm() < 1e-12 {
            return Err(GeometryError::PoseParse("zero quaternion".into()));
        }
        // Keep the stored quaternion bit-for-bit when it is already unit length.
        let rotation = if (q.norm() - 1.0).abs() < 1e-12 {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::new_normalize(q)
        };
        Ok(PoseSE3 { rotation, translation: Vector3::new(values[4], values[5], values[6]) })
    }
}

fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(q.into_inner())
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Ideal pinhole camera, pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl PinholeCamera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let cam = Self { fx, fy, cx, cy, width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(GeometryError::InvalidCamera("non-finite principal point".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidCamera("image size must be at least 1x1".into()));
        }
        Ok(())
    }

    /// Same camera with the image resized by `factor`.
    pub fn scaled(&self, factor: f64) -> PinholeCamera {
        let width = ((self.width as f64 - 1.0) * factor).round() as u32 + 1;
        let height = ((self.height as f64 - 1.0) * factor).round() as u32 + 1;
        PinholeCamera {
            fx: self.fx * factor,
            fy: self.fy * factor,
            cx: self.cx * factor,
            cy: self.cy * factor,
            width,
            height,
        }
    }

    pub fn project(&self, p_cam: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if !(p_cam.z > Z_MIN) {
            return Err(GeometryError::BehindCamera { z: p_cam.z });
        }
        Ok(Vector2::new(self.fx * p_cam.x / p_cam.z + self.cx, self.fy * p_cam.y / p_cam.z + self.cy))
    }

    /// Viewing ray (not normalized, z = 1) through a pixel.
    pub fn unproject(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0)
    }

    /// Inside `[-margin, w + margin) x [-margin, h + margin)`.
    pub fn contains(&self, pixel: &Vector2<f64>, margin: f64) -> bool {
        pixel.x >= -margin
            && pixel.y >= -margin
            && pixel.x < self.width as f64 + margin
            && pixel.y < self.height as f64 + margin
    }

    /// Derivative of the projected pixel with respect to the camera-frame point.
    pub fn project_point_jacobian(&self, p_cam: &Vector3<f64>) -> Result<Matrix2x3<f64>, GeometryError> {
        if !(p_cam.z > Z_MIN) {
            return Err(GeometryError::BehindCamera { z: p_cam.z });
        }
        let iz = 1.0 / p_cam.z;
        let iz2 = iz * iz;
        Ok(Matrix2x3::new(self.fx * iz, 0.0, -self.fx * p_cam.x * iz2, 0.0, self.fy * iz, -self.fy * p_cam.y * iz2))
    }

    /// Projection and its 2x6 derivative with respect to a left pose
    /// perturbation, given the point already in the camera frame.
    pub fn project_with_pose_jacobian(
        &self,
        p_cam: &Vector3<f64>,
    ) -> Result<(Vector2<f64>, Matrix2x6<f64>), GeometryError> {
        let pixel = self.project(p_cam)?;
        let dp = self.project_point_jacobian(p_cam)?;
        // d(exp(delta) * x)/d(delta) at 0 = [I | -[x]x]
        let dx_dw = -skew(p_cam);
        let mut jac = Matrix2x6::zeros();
        jac.fixed_view_mut::<2, 3>(0, 0).copy_from(&dp);
        jac.fixed_view_mut::<2, 3>(0, 3).copy_from(&(dp * dx_dw));
        Ok((pixel, jac))
    }
}

/// Pixel of a world point seen from `pose`.
pub fn project_world(
    camera: &PinholeCamera,
    pose: &PoseSE3,
    p_world: &Vector3<f64>,
) -> Result<Vector2<f64>, GeometryError> {
    camera.project(&pose.transform_point(p_world))
}

/// d(pixel)/d(delta) for the pose `exp(delta) * pose`, evaluated at `delta = 0`.
pub fn project_jacobian(
    camera: &PinholeCamera,
    pose: &PoseSE3,
    p_world: &Vector3<f64>,
) -> Result<Matrix2x6<f64>, GeometryError> {
    camera.project_with_pose_jacobian(&pose.transform_point(p_world)).map(|(_, j)| j)
}

/// Camera-centre distance and rotation angle (degrees) between two poses.
pub fn pose_error(est: &PoseSE3, gt: &PoseSE3) -> (f64, f64) {
    let trans = (est.center() - gt.center()).norm();
    (trans, rotation_angle_deg(&(est.rotation * gt.rotation.inverse())))
}

/// Rotation angle of a unit quaternion, accurate near zero.
pub fn rotation_angle_deg(q: &UnitQuaternion<f64>) -> f64 {
    let q = q.quaternion();
    let v = q.imag().norm();
    (2.0 * v.atan2(q.w.abs())).to_degrees()
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn tangent() -> impl Strategy<Value = Tangent> {
        (prop::array::uniform3(-5.0..5.0f64), prop::array::uniform3(-1.0..1.0f64)).prop_map(|(r, w)| {
            let w = Vector3::from(w);
            let w = w * (3.0 / w.norm().max(1.0));
            Tangent::new(r[0], r[1], r[2], w.x, w.y, w.z)
        })
    }

    proptest! {
        #[test]
        fn log_exp_round_trip(d in tangent()) {
            let back = PoseSE3::exp(&d).log();
            prop_assert!((back - d).amax() < 1e-9);
        }

        #[test]
        fn compose_with_inverse_is_identity(a in tangent(), p in prop::array::uniform3(-10.0..10.0f64)) {
            let pose = PoseSE3::exp(&a);
            let x = Vector3::from(p);
            prop_assert!((pose.inverse().transform_point(&pose.transform_point(&x)) - x).amax() < 1e-9);
            prop_assert!(pose.compose(&pose.inverse()).log().amax() < 1e-9);
        }

        #[test]
        fn pose_error_symmetric_and_zero_on_diagonal(a in tangent(), b in tangent()) {
            let (pa, pb) = (PoseSE3::exp(&a), PoseSE3::exp(&b));
            let (t1, r1) = pose_error(&pa, &pb);
            let (t2, r2) = pose_error(&pb, &pa);
            prop_assert!((t1 - t2).abs() < 1e-9 && (r1 - r2).abs() < 1e-6);
            let (t0, r0) = pose_error(&pa, &pa);
            prop_assert!(t0 < 1e-9 && r0 < 1e-4);
        }
    }
}
