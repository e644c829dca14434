//! Rotation kinematics and the pinhole camera model.
//!
//! Quaternions are Hamilton, `q = [w, x, y, z]`, and represent the rotation
//! taking body-frame vectors into the global frame. Orientation errors are
//! applied on the left in the global frame:
//!
//! ```text
//! q = δq ⊗ q̂,   δq ≈ [1, ½δθ],   R ≈ (I + [δθ]x) R̂
//! ```
//!
//! Many VIO codebases use the body-frame (right) convention instead; the two
//! are not interchangeable.

use nalgebra::{Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Quat = UnitQuaternion<f64>;

/// Smallest admissible depth in front of a camera, in meters.
pub const EPSILON_DEPTH: f64 = 1e-6;

/// Left-composes a small global-frame rotation error onto `q_hat`.
pub fn quat_error_compose(delta_theta: &Vector3<f64>, q_hat: &Quat) -> Quat {
    let dq = Quaternion::new(
        1.0,
        0.5 * delta_theta.x,
        0.5 * delta_theta.y,
        0.5 * delta_theta.z,
    );
    UnitQuaternion::new_normalize(dq * q_hat.into_inner())
}

/// Global-frame rotation error `θ` such that `R(q) ≈ (I + [θ]x) R(q_hat)`.
pub fn quat_error(q: &Quat, q_hat: &Quat) -> Vector3<f64> {
    (q * q_hat.inverse()).scaled_axis()
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn check_depth(p_c: &Vector3<f64>) -> Result<()> {
    if p_c.z > EPSILON_DEPTH {
        Ok(())
    } else {
        Err(Error::BehindCamera { depth: p_c.z })
    }
}

/// Projects a camera-frame point to normalized image coordinates.
pub fn project(p_c: &Vector3<f64>) -> Result<Vector2<f64>> {
    check_depth(p_c)?;
    Ok(Vector2::new(p_c.x / p_c.z, p_c.y / p_c.z))
}

/// Jacobian of [`project`] with respect to the camera-frame point.
pub fn projection_jacobian(p_c: &Vector3<f64>) -> Result<Matrix2x3<f64>> {
    check_depth(p_c)?;
    let (x, y, z) = (p_c.x, p_c.y, p_c.z);
    let inv_z2 = 1.0 / (z * z);
    Ok(Matrix2x3::new(z, 0.0, -x, 0.0, z, -y) * inv_z2)
}

/// Pinhole camera rigidly attached to the IMU.
///
/// `r_ic` rotates camera-frame vectors into the IMU frame and `p_ic` is the
/// camera center expressed in the IMU frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub r_ic: Matrix3<f64>,
    pub p_ic: Vector3<f64>,
}

impl PinholeCamera {
    /// Forward-looking camera mounted along the IMU x axis (camera z = body x,
    /// camera x = -body y, camera y = -body z).
    pub fn forward_looking(fx: f64, fy: f64, width: u32, height: u32) -> Self {
        Self {
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            r_ic: Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0),
            p_ic: Vector3::zeros(),
        }
    }

    /// Same intrinsics and orientation, with the camera center shifted by
    /// `baseline` meters along the camera x axis.
    pub fn stereo_partner(&self, baseline: f64) -> Self {
        let mut right = self.clone();
        right.p_ic = self.p_ic + self.r_ic * Vector3::new(baseline, 0.0, 0.0);
        right
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidConfig("focal lengths must be positive".into()));
        }
        let ortho = (self.r_ic.transpose() * self.r_ic - Matrix3::identity()).norm();
        if ortho > 1e-9 || (self.r_ic.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(
                "camera extrinsic rotation is not a proper rotation".into(),
            ));
        }
        Ok(())
    }

    /// Camera pose in the global frame for an IMU pose `(q_gi, p_gi)`.
    pub fn pose_in_world(&self, q_gi: &Quat, p_gi: &Vector3<f64>) -> (Matrix3<f64>, Vector3<f64>) {
        let r_gi = q_gi.to_rotation_matrix().into_inner();
        (r_gi * self.r_ic, p_gi + r_gi * self.p_ic)
    }

    /// Expresses a global point in this camera's frame.
    pub fn world_to_camera(&self, q_gi: &Quat, p_gi: &Vector3<f64>, p_g: &Vector3<f64>) -> Vector3<f64> {
        let r_gi = q_gi.to_rotation_matrix();
        let p_i = r_gi.inverse_transform_vector(&(p_g - p_gi));
        self.r_ic.transpose() * (p_i - self.p_ic)
    }

    pub fn pixel_to_normalized(&self, px: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy)
    }

    pub fn normalized_to_pixel(&self, z: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new(z.x * self.fx + self.cx, z.y * self.fy + self.cy)
    }

    pub fn in_image(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }

    /// Pixel standard deviation converted to normalized image units.
    pub fn normalized_sigma(&self, sigma_px: f64) -> f64 {
        sigma_px / self.fx
    }
}
