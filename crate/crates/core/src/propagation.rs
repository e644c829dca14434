//! IMU strapdown integration and error-state covariance propagation.

use nalgebra::{DMatrix, SMatrix, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{skew, Quat};
use crate::state::{ImuState, SlidingWindowState, BIAS_ACC, BIAS_GYRO, IMU_DIM, POS, THETA, VEL};

pub type Matrix15 = SMatrix<f64, 15, 15>;
type Matrix15x12 = SMatrix<f64, 15, 12>;
type Matrix12 = SMatrix<f64, 12, 12>;

/// Upper bound on a single integration step.
pub const MAX_DT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub t: f64,
    /// Measured angular rate, rad/s.
    pub gyro: Vector3<f64>,
    /// Measured specific force, m/s².
    pub accel: Vector3<f64>,
}

impl ImuSample {
    pub fn new(t: f64, gyro: Vector3<f64>, accel: Vector3<f64>) -> Self {
        Self { t, gyro, accel }
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite() && self.gyro.iter().chain(self.accel.iter()).all(|v| v.is_finite())
    }

    /// Linear interpolation between two samples.
    pub fn lerp(&self, other: &ImuSample, t: f64) -> ImuSample {
        let span = other.t - self.t;
        let a = if span > 0.0 { ((t - self.t) / span).clamp(0.0, 1.0) } else { 0.0 };
        ImuSample {
            t,
            gyro: self.gyro.lerp(&other.gyro, a),
            accel: self.accel.lerp(&other.accel, a),
        }
    }
}

/// Continuous-time IMU noise model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseParams {
    /// Gyro white noise, rad/s/√Hz.
    pub sigma_g: f64,
    /// Accelerometer white noise, m/s²/√Hz.
    pub sigma_a: f64,
    /// Gyro bias random walk, rad/s²/√Hz.
    pub sigma_bg: f64,
    /// Accelerometer bias random walk, m/s³/√Hz.
    pub sigma_ba: f64,
    pub gravity: Vector3<f64>,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            sigma_g: 1.7e-4,
            sigma_a: 2.0e-3,
            sigma_bg: 1.9e-5,
            sigma_ba: 3.0e-3,
            gravity: Vector3::new(0.0, 0.0, -9.81),
        }
    }
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        let sigmas = [self.sigma_g, self.sigma_a, self.sigma_bg, self.sigma_ba];
        if sigmas.iter().all(|s| *s > 0.0 && s.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidConfig("noise densities must be positive".into()))
        }
    }
}

fn check_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && dt < MAX_DT {
        Ok(())
    } else {
        Err(Error::InvalidDt(dt))
    }
}

/// Nominal IMU integration over `dt` with the sample held constant. Biases
/// are constant. Orientation uses the closed-form exponential of the held
/// rate; velocity and position use RK4 on the resulting rotation path.
pub fn propagate_nominal(state: &ImuState, sample: &ImuSample, dt: f64, noise: &NoiseParams) -> Result<ImuState> {
    check_dt(dt)?;
    let omega = sample.gyro - state.bg;
    let acc = sample.accel - state.ba;
    let g = noise.gravity;
    let q_at = |s: f64| state.q * UnitQuaternion::from_scaled_axis(omega * s);
    let a0 = state.q * acc + g;
    let a_mid = q_at(0.5 * dt) * acc + g;
    let a1 = q_at(dt) * acc + g;
    // RK4 on (p, v) with a time-only forcing term
    let k1p = state.v;
    let k2p = state.v + a0 * (0.5 * dt);
    let k3p = state.v + a_mid * (0.5 * dt);
    let k4p = state.v + a_mid * dt;
    Ok(ImuState {
        q: q_at(dt),
        p: state.p + (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (dt / 6.0),
        v: state.v + (a0 + a_mid * 4.0 + a1) * (dt / 6.0),
        ba: state.ba,
        bg: state.bg,
        t: state.t + dt,
    })
}

/// Continuous-time error-state dynamics matrix.
pub fn error_dynamics(q: &Quat, accel_unbiased: &Vector3<f64>) -> Matrix15 {
    let r = q.to_rotation_matrix().into_inner();
    let mut f = Matrix15::zeros();
    f.fixed_view_mut::<3, 3>(THETA, BIAS_GYRO).copy_from(&(-r));
    f.fixed_view_mut::<3, 3>(POS, VEL).fill_with_identity();
    f.fixed_view_mut::<3, 3>(VEL, THETA).copy_from(&(-skew(&(r * accel_unbiased))));
    f.fixed_view_mut::<3, 3>(VEL, BIAS_ACC).copy_from(&(-r));
    f
}

/// Noise input matrix; columns are `[n_a, n_ba, n_g, n_bg]`.
pub fn noise_input(q: &Quat) -> Matrix15x12 {
    let r = q.to_rotation_matrix().into_inner();
    let mut g = Matrix15x12::zeros();
    g.fixed_view_mut::<3, 3>(THETA, 6).copy_from(&(-r));
    g.fixed_view_mut::<3, 3>(VEL, 0).copy_from(&(-r));
    g.fixed_view_mut::<3, 3>(BIAS_ACC, 3).fill_with_identity();
    g.fixed_view_mut::<3, 3>(BIAS_GYRO, 9).fill_with_identity();
    g
}

/// Third-order series `Φ = I + F dt + ½F²dt² + ⅙F³dt³`.
///
/// `F` is nilpotent of index 4 for this error model, so the truncated series
/// is the exact matrix exponential.
pub fn transition_matrix(state: &ImuState, sample: &ImuSample, dt: f64) -> Result<Matrix15> {
    if !(dt > 0.0) {
        return Err(Error::InvalidDt(dt));
    }
    let f = error_dynamics(&state.q, &(sample.accel - state.ba)) * dt;
    let f2 = f * f;
    let f3 = f2 * f;
    Ok(Matrix15::identity() + f + f2 * 0.5 + f3 / 6.0)
}

/// Discrete process noise `Q = Φ G Q_I Gᵀ Φᵀ dt`.
pub fn discrete_noise(state: &ImuState, phi: &Matrix15, dt: f64, noise: &NoiseParams) -> Matrix15 {
    let g = noise_input(&state.q);
    let mut qi = Matrix12::zeros();
    let densities = [noise.sigma_a, noise.sigma_ba, noise.sigma_g, noise.sigma_bg];
    for (block, s) in densities.iter().enumerate() {
        for k in 0..3 {
            qi[(3 * block + k, 3 * block + k)] = s * s;
        }
    }
    let q = phi * g * qi * g.transpose() * phi.transpose() * dt;
    (q + q.transpose()) * 0.5
}

/// `P_II ← Φ P_II Φᵀ + Q`, `P_IA ← Φ P_IA`; the clone block is untouched.
pub fn propagate_covariance(state: &mut SlidingWindowState, phi: &Matrix15, qd: &Matrix15) -> Result<()> {
    let n = state.dim();
    if state.cov.nrows() != n {
        return Err(Error::DimensionMismatch { expected: n, actual: state.cov.nrows() });
    }
    let phi_d = DMatrix::from_column_slice(IMU_DIM, IMU_DIM, phi.as_slice());
    let q_d = DMatrix::from_column_slice(IMU_DIM, IMU_DIM, qd.as_slice());
    let p_ii = state.cov.view((0, 0), (IMU_DIM, IMU_DIM)).into_owned();
    let new_ii = &phi_d * p_ii * phi_d.transpose() + q_d;
    state.cov.view_mut((0, 0), (IMU_DIM, IMU_DIM)).copy_from(&new_ii);
    if n > IMU_DIM {
        let p_ia = state.cov.view((0, IMU_DIM), (IMU_DIM, n - IMU_DIM)).into_owned();
        let new_ia = &phi_d * p_ia;
        state.cov.view_mut((0, IMU_DIM), (IMU_DIM, n - IMU_DIM)).copy_from(&new_ia);
        state.cov.view_mut((IMU_DIM, 0), (n - IMU_DIM, IMU_DIM)).copy_from(&new_ia.transpose());
    }
    crate::state::symmetrize(&mut state.cov);
    Ok(())
}

/// One full propagation step: covariance with the linearization at the
/// start of the interval, then the nominal state.
pub fn propagate(state: &mut SlidingWindowState, sample: &ImuSample, dt: f64, noise: &NoiseParams) -> Result<()> {
    check_dt(dt)?;
    let phi = transition_matrix(&state.imu, sample, dt)?;
    let qd = discrete_noise(&state.imu, &phi, dt, noise);
    propagate_covariance(state, &phi, &qd)?;
    state.imu = propagate_nominal(&state.imu, sample, dt, noise)?;
    Ok(())
}
