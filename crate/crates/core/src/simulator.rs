//! Synthetic test bed: analytic trajectories, IMU synthesis, landmark fields
//! and feature tracks with configurable noise, plus a driver that runs the
//! filter over the generated streams.

use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Matrix6, SVector, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalio::{self, FeatureFrame, GroundTruth, TrajectoryRecord};
use crate::filter::{FeatureObservation, Filter, FilterConfig, FilterReport, InitConfig};
use crate::geometry::{project, quat_error, quat_error_compose, PinholeCamera, Quat};
use crate::propagation::{ImuSample, NoiseParams};
use crate::state::{
    ImuState, Landmark, LandmarkMap, LandmarkStatus, SlidingWindowState, TrackEntry, BIAS_ACC, BIAS_GYRO, IMU_DIM,
    POS, THETA, VEL,
};

/// Observations closer than this to the camera center are culled.
pub const MIN_DEPTH: f64 = 0.1;

/// Pixel noise draws are truncated at this many standard deviations.
pub const PIXEL_NOISE_TRUNCATION: f64 = 4.0;

/// Variance assigned to error-state components with a zero sigma.
pub const COVARIANCE_FLOOR: f64 = 1e-12;

const STREAM_LANDMARKS: u64 = 0;
const STREAM_IMU: u64 = 1;
const STREAM_PIXELS: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_SHAPE: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectoryKind {
    /// Horizontal circle with the body x axis pointing radially outward.
    Circle { radius: f64, angular_rate: f64, height: f64 },
    /// Smooth three-dimensional Lissajous-like motion with gentle roll,
    /// pitch and yaw oscillations.
    Sine3d { amplitude: f64, angular_rate: f64 },
    Stationary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LandmarkField {
    /// Points on the wall of a vertical cylinder around the origin.
    Cylinder { radius: f64, height: f64, count: usize },
    /// Points on the six faces of an axis-aligned box around the origin.
    Room { half_x: f64, half_y: f64, half_z: f64, count: usize },
}

impl LandmarkField {
    pub fn count(&self) -> usize {
        match *self {
            LandmarkField::Cylinder { count, .. } | LandmarkField::Room { count, .. } => count,
        }
    }
}

/// Continuous-time IMU noise densities used for synthesis. Zero disables a
/// noise source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimNoise {
    pub sigma_g: f64,
    pub sigma_a: f64,
    pub sigma_bg: f64,
    pub sigma_ba: f64,
    /// Feature noise, pixels.
    pub pixel_sigma: f64,
}

impl SimNoise {
    pub fn zero() -> Self {
        Self { sigma_g: 0.0, sigma_a: 0.0, sigma_bg: 0.0, sigma_ba: 0.0, pixel_sigma: 0.0 }
    }

    /// Densities matching a filter noise model, with the given pixel noise.
    pub fn matching(noise: &NoiseParams, pixel_sigma: f64) -> Self {
        Self {
            sigma_g: noise.sigma_g,
            sigma_a: noise.sigma_a,
            sigma_bg: noise.sigma_bg,
            sigma_ba: noise.sigma_ba,
            pixel_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub trajectory: TrajectoryKind,
    pub duration: f64,
    pub imu_rate: f64,
    pub cam_rate: f64,
    pub landmarks: LandmarkField,
    pub noise: SimNoise,
    pub gravity: Vector3<f64>,
    pub bias_acc: Vector3<f64>,
    pub bias_gyro: Vector3<f64>,
    pub camera: PinholeCamera,
    /// Adds a second camera displaced along the camera x axis.
    pub stereo_baseline: Option<f64>,
    /// Probability that an observation is replaced by a uniform pixel.
    pub outlier_rate: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        let noise = NoiseParams::default();
        Self {
            trajectory: TrajectoryKind::Circle { radius: 5.0, angular_rate: 0.2, height: 0.0 },
            duration: 20.0,
            imu_rate: 200.0,
            cam_rate: 20.0,
            landmarks: LandmarkField::Cylinder { radius: 10.0, height: 6.0, count: 600 },
            noise: SimNoise::matching(&noise, 1.0),
            gravity: noise.gravity,
            bias_acc: Vector3::new(0.02, -0.01, 0.015),
            bias_gyro: Vector3::new(1e-3, -2e-3, 1.5e-3),
            camera: PinholeCamera::forward_looking(458.0, 457.0, 752, 480),
            stereo_baseline: None,
            outlier_rate: 0.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.imu_rate > 0.0 && self.cam_rate > 0.0) {
            return bad("rates must be positive");
        }
        if self.imu_rate < self.cam_rate {
            return bad("imu_rate must be at least cam_rate");
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad("duration must be positive");
        }
        let n = &self.noise;
        if ![n.sigma_g, n.sigma_a, n.sigma_bg, n.sigma_ba, n.pixel_sigma].iter().all(|s| s.is_finite() && *s >= 0.0) {
            return bad("noise densities must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.outlier_rate) {
            return bad("outlier_rate must lie in [0, 1]");
        }
        if self.landmarks.count() == 0 {
            return bad("landmark count must be positive");
        }
        if let Some(b) = self.stereo_baseline {
            if !(b > 0.0 && b.is_finite()) {
                return bad("stereo baseline must be positive");
            }
        }
        self.camera.validate()
    }

    pub fn cameras(&self) -> Vec<PinholeCamera> {
        let mut cams = vec![self.camera.clone()];
        if let Some(b) = self.stereo_baseline {
            cams.push(self.camera.stereo_partner(b));
        }
        cams
    }

    /// Filter configuration sharing this simulation's cameras, gravity and
    /// noise model. Zero simulated densities are replaced by the defaults,
    /// since the filter needs a positive noise model.
    pub fn filter_config(&self) -> FilterConfig {
        let defaults = NoiseParams::default();
        let pick = |v: f64, d: f64| if v > 0.0 { v } else { d };
        let noise = NoiseParams {
            sigma_g: pick(self.noise.sigma_g, defaults.sigma_g),
            sigma_a: pick(self.noise.sigma_a, defaults.sigma_a),
            sigma_bg: pick(self.noise.sigma_bg, defaults.sigma_bg),
            sigma_ba: pick(self.noise.sigma_ba, defaults.sigma_ba),
            gravity: self.gravity,
        };
        FilterConfig {
            noise,
            cameras: self.cameras(),
            pixel_sigma: pick(self.noise.pixel_sigma, 1.0),
            ..FilterConfig::default()
        }
    }
}

/// `offset + rate·t + amp·sin(freq·t + phase)` and its first two derivatives.
#[derive(Debug, Clone, Copy, Default)]
struct Wave {
    offset: f64,
    rate: f64,
    amp: f64,
    freq: f64,
    phase: f64,
}

impl Wave {
    fn constant(offset: f64) -> Self {
        Self { offset, ..Default::default() }
    }

    fn sine(amp: f64, freq: f64, phase: f64) -> Self {
        Self { amp, freq, phase, ..Default::default() }
    }

    fn eval(&self, t: f64) -> (f64, f64, f64) {
        let arg = self.freq * t + self.phase;
        (
            self.offset + self.rate * t + self.amp * arg.sin(),
            self.rate + self.amp * self.freq * arg.cos(),
            -self.amp * self.freq * self.freq * arg.sin(),
        )
    }
}

/// Kinematic state of an analytic trajectory at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    pub q: Quat,
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    /// World-frame acceleration.
    pub a: Vector3<f64>,
    /// Body-frame angular rate.
    pub omega: Vector3<f64>,
}

/// Analytic trajectory: position waves and roll/pitch/yaw waves.
#[derive(Debug, Clone, Copy)]
pub struct Trajectory {
    pos: [Wave; 3],
    euler: [Wave; 3],
}

impl Trajectory {
    pub fn new(kind: &TrajectoryKind) -> Self {
        match *kind {
            TrajectoryKind::Circle { radius, angular_rate, height } => Self {
                pos: [
                    Wave::sine(radius, angular_rate, FRAC_PI_2),
                    Wave::sine(radius, angular_rate, 0.0),
                    Wave::constant(height),
                ],
                euler: [Wave::default(), Wave::default(), Wave { rate: angular_rate, ..Default::default() }],
            },
            TrajectoryKind::Sine3d { amplitude, angular_rate: w } => Self {
                pos: [
                    Wave::sine(amplitude, w, 0.0),
                    Wave::sine(amplitude, 0.8 * w, 1.0),
                    Wave::sine(0.3 * amplitude, 1.3 * w, 0.0),
                ],
                euler: [Wave::sine(0.1, 1.1 * w, 0.0), Wave::sine(0.1, 0.9 * w, 0.3), Wave::sine(0.8, 0.5 * w, 0.0)],
            },
            TrajectoryKind::Stationary => Self { pos: [Wave::default(); 3], euler: [Wave::default(); 3] },
        }
    }

    pub fn at(&self, t: f64) -> Kinematics {
        let [x, y, z] = self.pos.map(|w| w.eval(t));
        let [(roll, droll, _), (pitch, dpitch, _), (yaw, dyaw, _)] = self.euler.map(|w| w.eval(t));
        // body rates of R = Rz(yaw) Ry(pitch) Rx(roll)
        let omega = Vector3::new(
            droll - dyaw * pitch.sin(),
            dpitch * roll.cos() + dyaw * roll.sin() * pitch.cos(),
            -dpitch * roll.sin() + dyaw * roll.cos() * pitch.cos(),
        );
        Kinematics {
            q: UnitQuaternion::from_euler_angles(roll, pitch, yaw),
            p: Vector3::new(x.0, y.0, z.0),
            v: Vector3::new(x.1, y.1, z.1),
            a: Vector3::new(x.2, y.2, z.2),
            omega,
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(normal(rng), normal(rng), normal(rng))
}

fn truncated_normal(rng: &mut ChaCha8Rng, limit: f64) -> f64 {
    loop {
        let n = normal(rng);
        if n.abs() <= limit {
            return n;
        }
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Draws a landmark field centered at `center`.
pub fn sample_landmarks(field: &LandmarkField, center: &Vector3<f64>, seed: u64) -> Vec<Vector3<f64>> {
    let mut rng = stream(seed, STREAM_LANDMARKS);
    match *field {
        LandmarkField::Cylinder { radius, height, count } => (0..count)
            .map(|_| {
                let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let z: f64 = rng.random_range(-0.5..0.5) * height;
                center + Vector3::new(radius * a.cos(), radius * a.sin(), z)
            })
            .collect(),
        LandmarkField::Room { half_x, half_y, half_z, count } => {
            let h = [half_x, half_y, half_z];
            let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
            let total: f64 = areas.iter().sum();
            (0..count)
                .map(|_| {
                    let pick = rng.random_range(0.0..total);
                    let axis = if pick < areas[0] { 0 } else if pick < areas[0] + areas[1] { 1 } else { 2 };
                    let mut p = Vector3::from_fn(|i, _| rng.random_range(-1.0..1.0) * h[i]);
                    p[axis] = if rng.random_bool(0.5) { h[axis] } else { -h[axis] };
                    center + p
                })
                .collect()
        }
    }
}

/// Projects every visible landmark into every camera at pose `(q, p)`.
/// Landmark ids are their indices in `landmarks`.
pub fn observe(
    q: &Quat,
    p: &Vector3<f64>,
    landmarks: &[Vector3<f64>],
    cams: &[PinholeCamera],
    pixel_sigma: f64,
    outlier_rate: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<FeatureObservation> {
    let mut out = Vec::new();
    for (id, x) in landmarks.iter().enumerate() {
        for (c, cam) in cams.iter().enumerate() {
            let p_c = cam.world_to_camera(q, p, x);
            if p_c.z <= MIN_DEPTH {
                continue;
            }
            let Ok(z) = project(&p_c) else { continue };
            let px = cam.normalized_to_pixel(&z);
            if !cam.in_image(&px) {
                continue;
            }
            let measured = if outlier_rate > 0.0 && rng.random_bool(outlier_rate) {
                Vector2::new(
                    rng.random_range(0.0..cam.width as f64),
                    rng.random_range(0.0..cam.height as f64),
                )
            } else if pixel_sigma > 0.0 {
                px + Vector2::new(
                    truncated_normal(rng, PIXEL_NOISE_TRUNCATION),
                    truncated_normal(rng, PIXEL_NOISE_TRUNCATION),
                ) * pixel_sigma
            } else {
                px
            };
            out.push(FeatureObservation { landmark_id: id as u64, camera: c, z: cam.pixel_to_normalized(&measured) });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub imu: Vec<ImuSample>,
    /// Ground truth at every IMU sample.
    pub imu_truth: Vec<GroundTruth>,
    pub frames: Vec<FeatureFrame>,
    /// Ground truth at every frame.
    pub frame_truth: Vec<GroundTruth>,
    pub landmarks: Vec<Vector3<f64>>,
    pub cameras: Vec<PinholeCamera>,
}

/// Generates a full synthetic run. IMU samples are the analytic rates plus
/// bias and white noise with `σ_d = σ_c·√rate`; biases follow a random walk
/// with per-sample increments `σ_b·√dt`. Frames coincide with IMU samples.
pub fn generate(config: &SimConfig) -> Result<SimOutput> {
    config.validate()?;
    let traj = Trajectory::new(&config.trajectory);
    let cams = config.cameras();
    let landmarks = sample_landmarks(&config.landmarks, &Vector3::zeros(), config.seed);
    let mut imu_rng = stream(config.seed, STREAM_IMU);
    let mut pix_rng = stream(config.seed, STREAM_PIXELS);

    let dt = 1.0 / config.imu_rate;
    let n_imu = (config.duration * config.imu_rate).round() as usize + 1;
    let sqrt_rate = config.imu_rate.sqrt();
    let n = &config.noise;
    let mut ba = config.bias_acc;
    let mut bg = config.bias_gyro;
    let mut imu = Vec::with_capacity(n_imu);
    let mut imu_truth = Vec::with_capacity(n_imu);
    for k in 0..n_imu {
        let t = k as f64 * dt;
        let kin = traj.at(t);
        let gyro = kin.omega + bg + normal3(&mut imu_rng) * (n.sigma_g * sqrt_rate);
        let accel = kin.q.inverse() * (kin.a - config.gravity) + ba + normal3(&mut imu_rng) * (n.sigma_a * sqrt_rate);
        imu.push(ImuSample::new(t, gyro, accel));
        imu_truth.push(GroundTruth { t, p: kin.p, q: kin.q, v: kin.v, bg, ba });
        bg += normal3(&mut imu_rng) * (n.sigma_bg * dt.sqrt());
        ba += normal3(&mut imu_rng) * (n.sigma_ba * dt.sqrt());
    }

    let n_frames = (config.duration * config.cam_rate).floor() as usize + 1;
    let mut frames = Vec::with_capacity(n_frames);
    let mut frame_truth = Vec::with_capacity(n_frames);
    let mut last_index = None;
    for j in 0..n_frames {
        let k = ((j as f64 / config.cam_rate) * config.imu_rate).round() as usize;
        if k >= n_imu || last_index == Some(k) {
            continue;
        }
        last_index = Some(k);
        let gt = imu_truth[k];
        let observations =
            observe(&gt.q, &gt.p, &landmarks, &cams, n.pixel_sigma, config.outlier_rate, &mut pix_rng);
        frames.push(FeatureFrame { t: gt.t, observations });
        frame_truth.push(gt);
    }
    Ok(SimOutput { imu, imu_truth, frames, frame_truth, landmarks, cameras: cams })
}

/// Settings for running on recorded IMU data with synthetic feature tracks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemiSyntheticConfig {
    pub cam_rate: f64,
    pub landmark_count: usize,
    /// Distance from the trajectory bounding box to the landmark walls, m.
    pub margin: f64,
    pub pixel_sigma: f64,
    pub camera: PinholeCamera,
    pub seed: u64,
}

impl Default for SemiSyntheticConfig {
    fn default() -> Self {
        Self {
            cam_rate: 20.0,
            landmark_count: 1500,
            margin: 4.0,
            pixel_sigma: 1.0,
            camera: PinholeCamera::forward_looking(458.0, 457.0, 752, 480),
            seed: 0,
        }
    }
}

/// Pairs a recorded IMU stream and ground truth with feature tracks obtained
/// by projecting a synthetic room of landmarks onto the ground-truth poses.
pub fn semi_synthetic(imu: &[ImuSample], truth: &[GroundTruth], config: &SemiSyntheticConfig) -> Result<SimOutput> {
    if truth.is_empty() || imu.is_empty() {
        return Err(Error::InvalidConfig("dataset has no samples".into()));
    }
    if !(config.cam_rate > 0.0 && config.landmark_count > 0 && config.margin > 0.0) {
        return Err(Error::InvalidConfig("invalid semi-synthetic settings".into()));
    }
    config.camera.validate()?;
    let (lo, hi) = truth.iter().fold(
        (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), g| (lo.inf(&g.p), hi.sup(&g.p)),
    );
    let center = (lo + hi) * 0.5;
    let half = (hi - lo) * 0.5 + Vector3::repeat(config.margin);
    let field = LandmarkField::Room { half_x: half.x, half_y: half.y, half_z: half.z, count: config.landmark_count };
    let landmarks = sample_landmarks(&field, &center, config.seed);
    let cams = vec![config.camera.clone()];
    let mut rng = stream(config.seed, STREAM_PIXELS);

    let start = truth[0].t.max(imu[0].t);
    let end = truth[truth.len() - 1].t.min(imu[imu.len() - 1].t);
    let mut frames = Vec::new();
    let mut frame_truth = Vec::new();
    let mut next = start;
    for gt in truth.iter().filter(|g| g.t >= start && g.t <= end) {
        if gt.t + 1e-9 < next {
            continue;
        }
        next = gt.t + 1.0 / config.cam_rate;
        let observations = observe(&gt.q, &gt.p, &landmarks, &cams, config.pixel_sigma, 0.0, &mut rng);
        frames.push(FeatureFrame { t: gt.t, observations });
        frame_truth.push(*gt);
    }
    Ok(SimOutput {
        imu: imu.to_vec(),
        imu_truth: truth.to_vec(),
        frames,
        frame_truth,
        landmarks,
        cameras: cams,
    })
}

/// Ground truth perturbed by a seeded Gaussian draw with the given sigmas,
/// and the matching diagonal covariance.
pub fn perturb_initialization(truth: &GroundTruth, sigmas: &InitConfig, seed: u64) -> SlidingWindowState {
    let mut rng = stream(seed, STREAM_INIT);
    let d_theta = normal3(&mut rng) * sigmas.sigma_theta;
    let d_p = normal3(&mut rng) * sigmas.sigma_p;
    let d_v = normal3(&mut rng) * sigmas.sigma_v;
    let d_ba = normal3(&mut rng) * sigmas.sigma_ba;
    let d_bg = normal3(&mut rng) * sigmas.sigma_bg;
    let imu = ImuState {
        q: quat_error_compose(&d_theta, &truth.q),
        p: truth.p + d_p,
        v: truth.v + d_v,
        ba: truth.ba + d_ba,
        bg: truth.bg + d_bg,
        t: truth.t,
    };
    let mut cov = sigmas.covariance();
    for i in 0..IMU_DIM {
        cov[(i, i)] = cov[(i, i)].max(COVARIANCE_FLOOR);
    }
    // the covariance has the correct dimension by construction
    SlidingWindowState::new(imu, cov).unwrap_or_else(|_| unreachable!())
}

/// Error `truth ⊖ estimate` of the full IMU state, ordered as the error state.
pub fn imu_error(truth: &GroundTruth, est: &ImuState) -> SVector<f64, 15> {
    let mut e = SVector::<f64, 15>::zeros();
    e.fixed_rows_mut::<3>(THETA).copy_from(&quat_error(&truth.q, &est.q));
    e.fixed_rows_mut::<3>(POS).copy_from(&(truth.p - est.p));
    e.fixed_rows_mut::<3>(VEL).copy_from(&(truth.v - est.v));
    e.fixed_rows_mut::<3>(BIAS_ACC).copy_from(&(truth.ba - est.ba));
    e.fixed_rows_mut::<3>(BIAS_GYRO).copy_from(&(truth.bg - est.bg));
    e
}

/// Normalized estimation error squared of the current `(θ, p)`.
pub fn pose_nees(truth: &GroundTruth, state: &SlidingWindowState) -> Result<f64> {
    let e = imu_error(truth, &state.imu).fixed_rows::<6>(0).into_owned();
    let p: Matrix6<f64> = state.cov.fixed_view::<6, 6>(0, 0).into_owned();
    let chol = p.cholesky().ok_or(Error::InnovationNotInvertible)?;
    Ok(e.dot(&chol.solve(&e)))
}

/// NEES of the full 15-dimensional IMU error.
pub fn imu_nees(truth: &GroundTruth, state: &SlidingWindowState) -> Result<f64> {
    let e = DMatrix::from_column_slice(15, 1, imu_error(truth, &state.imu).as_slice());
    let p = state.cov.view((0, 0), (IMU_DIM, IMU_DIM)).into_owned();
    let chol = p.cholesky().ok_or(Error::InnovationNotInvertible)?;
    Ok((e.transpose() * chol.solve(&e))[(0, 0)])
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Filter estimate after every frame.
    pub estimates: Vec<TrajectoryRecord>,
    pub truth: Vec<TrajectoryRecord>,
    /// Pose NEES after every frame.
    pub nees: Vec<f64>,
    pub reports: Vec<FilterReport>,
    pub final_state: SlidingWindowState,
    pub dropped_imu: usize,
}

impl RunOutput {
    pub fn ate_rmse(&self) -> Result<f64> {
        evalio::ate_rmse(&self.estimates, &self.truth)
    }

    pub fn mean_nees(&self) -> f64 {
        self.nees.iter().sum::<f64>() / self.nees.len().max(1) as f64
    }

    pub fn final_position_error(&self) -> f64 {
        match (self.estimates.last(), self.truth.last()) {
            (Some(e), Some(t)) => (e.p - t.p).norm(),
            _ => f64::NAN,
        }
    }
}

/// Feeds a generated run through a filter started from `init`. IMU samples
/// are delivered up to each frame time before the frame itself.
pub fn run_filter(output: &SimOutput, config: FilterConfig, init: SlidingWindowState) -> Result<RunOutput> {
    let mut filter = Filter::with_state(config, init)?;
    let start = filter.state().map_or(0.0, |s| s.imu.t);
    let mut k = output.imu.partition_point(|s| s.t < start - 1e-9);
    let mut run = RunOutput {
        estimates: Vec::with_capacity(output.frames.len()),
        truth: Vec::with_capacity(output.frames.len()),
        nees: Vec::with_capacity(output.frames.len()),
        reports: Vec::with_capacity(output.frames.len()),
        final_state: filter.state().cloned().ok_or(Error::NotInitialized)?,
        dropped_imu: 0,
    };
    for (frame, gt) in output.frames.iter().zip(&output.frame_truth) {
        if frame.t < start - 1e-9 {
            continue;
        }
        while k < output.imu.len() && output.imu[k].t <= frame.t + 1e-9 {
            match filter.process_imu(output.imu[k]) {
                Ok(()) | Err(Error::NonMonotonicTime { .. }) | Err(Error::NonFiniteInput) => {}
                Err(e) => return Err(e),
            }
            k += 1;
        }
        let report = filter.process_frame(&frame.observations, frame.t)?;
        let state = filter.state().ok_or(Error::NotInitialized)?;
        run.estimates.push(TrajectoryRecord { t: frame.t, p: state.imu.p, q: state.imu.q });
        run.truth.push(gt.record());
        run.nees.push(pose_nees(gt, state)?);
        run.reports.push(report);
    }
    run.final_state = filter.state().cloned().ok_or(Error::NotInitialized)?;
    run.dropped_imu = filter.dropped_imu();
    Ok(run)
}

/// Writes a run in the EuRoC layout: `imu0/data.csv`,
/// `state_groundtruth_estimate0/data.csv` and `features/data.csv`.
pub fn write_dataset(output: &SimOutput, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["imu0", "state_groundtruth_estimate0", "features"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    evalio::write_imu_csv(&output.imu, dir.join("imu0/data.csv"))?;
    evalio::write_euroc_groundtruth(&output.imu_truth, dir.join("state_groundtruth_estimate0/data.csv"))?;
    evalio::write_features_csv(&output.frames, dir.join("features/data.csv"))?;
    Ok(())
}

/// Reads the IMU stream and ground truth of a EuRoC-layout directory. The
/// directory may be the sequence root or its `mav0` subdirectory.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<(Vec<ImuSample>, Vec<GroundTruth>)> {
    let root = dir.as_ref();
    let nested = root.join("mav0");
    let dir = if nested.is_dir() { nested.as_path() } else { root };
    let imu = evalio::read_imu_csv(dir.join("imu0/data.csv"))?;
    let gt = evalio::read_euroc_groundtruth(dir.join("state_groundtruth_estimate0/data.csv"))?;
    Ok((imu, gt))
}

/// A random sliding window with landmarks in front of the cameras, used by
/// the equivalence battery and the benchmarks.
#[derive(Debug, Clone)]
pub struct WindowInstance {
    pub state: SlidingWindowState,
    pub landmarks: LandmarkMap,
    pub cameras: Vec<PinholeCamera>,
    /// Normalized feature noise.
    pub u: f64,
}

/// Equivalence-battery instance for `seed`: 2 to 6 clones, 1 to 50
/// landmarks with 2 to 8 observations each, adversarial for every fifth seed.
pub fn battery_instance(seed: u64) -> Result<WindowInstance> {
    let mut rng = stream(seed, STREAM_SHAPE);
    let clones = rng.random_range(2..=6);
    let landmarks = rng.random_range(1..=50);
    random_window_instance(seed, clones, landmarks, 2, 8, seed.is_multiple_of(5))
}

/// Builds a window of `clones` stereo clones around the origin looking along
/// +x and `landmarks` points observed `min_obs..=max_obs` times from at least
/// two clones. Measurements use the true geometry; the state and landmark
/// estimates are perturbed copies, so residuals are nonzero.
///
/// With `adversarial`, clones 0 and 1 share a position and a few extra
/// landmarks are seen only from that position, which makes their Hessian
/// blocks singular.
pub fn random_window_instance(
    seed: u64,
    clones: usize,
    landmarks: usize,
    min_obs: usize,
    max_obs: usize,
    adversarial: bool,
) -> Result<WindowInstance> {
    if clones < 2 || min_obs < 2 || max_obs < min_obs {
        return Err(Error::InvalidConfig("need at least two clones and two observations".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let left = PinholeCamera::forward_looking(458.0, 457.0, 752, 480);
    let cams = vec![left.clone(), left.stereo_partner(0.11)];
    let u = left.normalized_sigma(1.0);

    let mut truth: Vec<(Quat, Vector3<f64>)> = (0..clones)
        .map(|_| {
            let q = UnitQuaternion::from_euler_angles(
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.15..0.15),
            );
            (q, Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5)))
        })
        .collect();
    if adversarial {
        truth[1].1 = truth[0].1;
    }

    let a = DMatrix::from_fn(IMU_DIM + 6 * clones, IMU_DIM + 6 * clones, |_, _| rng.random_range(-1.0..1.0));
    let n = a.nrows();
    let cov = (&a * a.transpose() / n as f64 + DMatrix::identity(n, n) * 0.05) * 1e-4;
    let mut state = SlidingWindowState::new(ImuState::at_rest(0.0), cov.view((0, 0), (IMU_DIM, IMU_DIM)).into_owned())?;
    for (q, p) in &truth {
        state.imu.q = quat_error_compose(&(normal3(&mut rng) * 0.01), q);
        state.imu.p = p + normal3(&mut rng) * 0.02;
        state.augment();
    }
    if adversarial {
        state.clones[1].p = state.clones[0].p;
    }
    state.set_cov(cov)?;

    let mut map = LandmarkMap::new();
    let visible = |x: &Vector3<f64>, ci: usize, cam: usize| {
        let (q, p) = &truth[ci];
        let p_c = cams[cam].world_to_camera(q, p, x);
        p_c.z > 1.0 && project(&p_c).is_ok_and(|z| cams[cam].in_image(&cams[cam].normalized_to_pixel(&z)))
    };
    let mut id = 0u64;
    let mut push = |map: &mut LandmarkMap, x: Vector3<f64>, observers: &[(usize, usize)], rng: &mut ChaCha8Rng| {
        let mut lm = Landmark::candidate(id);
        lm.p_g = x + normal3(rng) * 0.1;
        lm.cov = Matrix3::identity() * 0.01;
        lm.status = LandmarkStatus::Estimating;
        for &(ci, cam) in observers {
            let (q, p) = &truth[ci];
            let z = project(&cams[cam].world_to_camera(q, p, &x)).unwrap_or_else(|_| Vector2::zeros());
            let z = z + Vector2::new(normal(rng), normal(rng)) * u;
            lm.track.push(TrackEntry { clone_id: state.clones[ci].id, camera: cam, z });
        }
        map.insert(id, lm);
        id += 1;
    };

    while map.len() < landmarks {
        let x = Vector3::new(rng.random_range(4.0..15.0), rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0));
        let mut pairs: Vec<(usize, usize)> =
            (0..clones).flat_map(|c| [(c, 0), (c, 1)]).filter(|&(c, k)| visible(&x, c, k)).collect();
        // shuffle, then move a pair from a second clone to the front
        for i in (1..pairs.len()).rev() {
            let j = rng.random_range(0..=i);
            pairs.swap(i, j);
        }
        let Some(second) = pairs.iter().position(|p| p.0 != pairs[0].0) else { continue };
        pairs.swap(1, second);
        let k = rng.random_range(min_obs..=max_obs).min(pairs.len());
        push(&mut map, x, &pairs[..k], &mut rng);
    }
    if adversarial {
        let mut placed = 0;
        for _ in 0..1000 {
            let x = Vector3::new(rng.random_range(4.0..15.0), rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5));
            if visible(&x, 0, 0) && visible(&x, 1, 0) {
                push(&mut map, x, &[(0, 0), (1, 0)], &mut rng);
                placed += 1;
                if placed == 3 {
                    break;
                }
            }
        }
    }
    Ok(WindowInstance { state, landmarks: map, cameras: cams, u })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propagation::propagate_nominal;

    fn zero_noise(kind: TrajectoryKind, duration: f64) -> SimConfig {
        SimConfig {
            trajectory: kind,
            duration,
            noise: SimNoise::zero(),
            bias_acc: Vector3::zeros(),
            bias_gyro: Vector3::zeros(),
            ..SimConfig::default()
        }
    }

    #[test]
    fn stationary_imu_is_exact() {
        let out = generate(&zero_noise(TrajectoryKind::Stationary, 1.0)).unwrap();
        for s in &out.imu {
            assert_eq!(s.gyro, Vector3::zeros());
            assert_eq!(s.accel, Vector3::new(0.0, 0.0, 9.81));
        }
    }

    #[test]
    fn circle_centripetal_acceleration() {
        let out = generate(&zero_noise(TrajectoryKind::Circle { radius: 5.0, angular_rate: 0.2, height: 0.0 }, 2.0)).unwrap();
        for s in &out.imu {
            let horizontal = Vector2::new(s.accel.x, s.accel.y).norm();
            assert!((horizontal - 0.2).abs() < 1e-12, "{horizontal}");
            assert!((s.gyro - Vector3::new(0.0, 0.0, 0.2)).norm() < 1e-15);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for kind in [
            TrajectoryKind::Circle { radius: 5.0, angular_rate: 0.2, height: 1.0 },
            TrajectoryKind::Sine3d { amplitude: 2.0, angular_rate: 0.6 },
        ] {
            let traj = Trajectory::new(&kind);
            let h = 1e-4;
            for k in 0..50 {
                let t = 0.37 * k as f64;
                let (a, b, c) = (traj.at(t - h), traj.at(t), traj.at(t + h));
                let v_fd = (c.p - a.p) / (2.0 * h);
                let a_fd = (c.v - a.v) / (2.0 * h);
                let w_fd = (b.q.inverse() * c.q).scaled_axis() / h - (b.q.inverse() * a.q).scaled_axis() / h;
                assert!((v_fd - b.v).norm() < 1e-6);
                assert!((a_fd - b.a).norm() < 1e-6);
                assert!((w_fd * 0.5 - b.omega).norm() < 1e-6, "{w_fd} {}", b.omega);
            }
        }
    }

    #[test]
    fn integration_reproduces_ground_truth() {
        let config = zero_noise(TrajectoryKind::Circle { radius: 5.0, angular_rate: 0.2, height: 0.0 }, 60.0);
        let out = generate(&config).unwrap();
        let noise = NoiseParams { gravity: config.gravity, ..NoiseParams::default() };
        let g0 = out.imu_truth[0];
        let mut s = ImuState { q: g0.q, p: g0.p, v: g0.v, ba: g0.ba, bg: g0.bg, t: g0.t };
        for k in 1..out.imu.len() {
            let hold = ImuSample::new(
                out.imu[k].t,
                (out.imu[k - 1].gyro + out.imu[k].gyro) * 0.5,
                (out.imu[k - 1].accel + out.imu[k].accel) * 0.5,
            );
            s = propagate_nominal(&s, &hold, out.imu[k].t - out.imu[k - 1].t, &noise).unwrap();
        }
        let last = out.imu_truth.last().unwrap();
        assert!((s.p - last.p).norm() < 1e-6, "{}", (s.p - last.p).norm());
        assert!(s.q.angle_to(&last.q) < 1e-7);
    }

    #[test]
    fn observations_reproject_within_truncation() {
        let mut config = SimConfig { duration: 2.0, ..SimConfig::default() };
        config.noise.pixel_sigma = 1.5;
        let out = generate(&config).unwrap();
        let mut count = 0;
        for (frame, gt) in out.frames.iter().zip(&out.frame_truth) {
            for o in &frame.observations {
                let cam = &out.cameras[o.camera];
                let truth = cam.normalized_to_pixel(&project(&cam.world_to_camera(&gt.q, &gt.p, &out.landmarks[o.landmark_id as usize])).unwrap());
                let err = cam.normalized_to_pixel(&o.z) - truth;
                assert!(err.abs().max() <= PIXEL_NOISE_TRUNCATION * 1.5 + 1e-9);
                count += 1;
            }
        }
        assert!(count > 1000, "{count}");
    }

    #[test]
    fn generation_is_deterministic() {
        let config = SimConfig { duration: 1.0, outlier_rate: 0.05, ..SimConfig::default() };
        assert_eq!(generate(&config).unwrap(), generate(&config).unwrap());
        let other = SimConfig { seed: 1, ..config.clone() };
        assert_ne!(generate(&config).unwrap().imu, generate(&other).unwrap().imu);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let c = SimConfig { cam_rate: 400.0, ..SimConfig::default() };
        assert!(matches!(generate(&c), Err(Error::InvalidConfig(_))));
        let c = SimConfig { imu_rate: 0.0, ..SimConfig::default() };
        assert!(matches!(generate(&c), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn zero_sigmas_give_exact_truth() {
        let out = generate(&zero_noise(TrajectoryKind::Stationary, 0.1)).unwrap();
        let sigmas = InitConfig { samples: 1, sigma_theta: 0.0, sigma_p: 0.0, sigma_v: 0.0, sigma_ba: 0.0, sigma_bg: 0.0 };
        let s = perturb_initialization(&out.imu_truth[0], &sigmas, 3);
        assert_eq!(s.imu.p, out.imu_truth[0].p);
        assert_eq!(s.imu.q, out.imu_truth[0].q);
        assert!(s.cov.diagonal().iter().all(|v| *v == COVARIANCE_FLOOR));
    }

    #[test]
    fn initial_nees_averages_state_dimension() {
        let gt = generate(&SimConfig { duration: 0.1, ..SimConfig::default() }).unwrap().imu_truth[0];
        let sigmas = FilterConfig::default().init;
        let mean = (0..500).map(|seed| imu_nees(&gt, &perturb_initialization(&gt, &sigmas, seed)).unwrap()).sum::<f64>() / 500.0;
        // χ²(15) sample mean over 500 draws has standard deviation √(30/500)
        assert!((mean - 15.0).abs() < 4.0 * (30.0f64 / 500.0).sqrt(), "{mean}");
        let a = perturb_initialization(&gt, &sigmas, 9);
        assert_eq!(a, perturb_initialization(&gt, &sigmas, 9));
    }

    #[test]
    fn dataset_round_trip() {
        let out = generate(&SimConfig { duration: 1.0, ..SimConfig::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&out, dir.path()).unwrap();
        let (imu, gt) = read_dataset(dir.path()).unwrap();
        assert_eq!(imu.len(), out.imu.len());
        for (a, b) in imu.iter().zip(&out.imu) {
            assert!((a.t - b.t).abs() < 1e-9);
            assert_eq!(a.gyro, b.gyro);
        }
        assert_eq!(gt.len(), out.imu_truth.len());
        let frames = evalio::read_features_csv(dir.path().join("features/data.csv")).unwrap();
        assert_eq!(frames.len(), out.frames.iter().filter(|f| !f.observations.is_empty()).count());
        assert_eq!(frames[0].observations, out.frames[0].observations);
    }

    #[test]
    fn zero_noise_run_with_perfect_init_stays_on_truth() {
        let config = zero_noise(TrajectoryKind::Circle { radius: 5.0, angular_rate: 0.2, height: 0.0 }, 10.0);
        let out = generate(&config).unwrap();
        let sigmas = InitConfig { sigma_theta: 0.0, sigma_p: 0.0, sigma_v: 0.0, sigma_ba: 0.0, sigma_bg: 0.0, ..FilterConfig::default().init };
        let mut init = perturb_initialization(&out.frame_truth[0], &sigmas, 0);
        init.cov = FilterConfig::default().init.covariance();
        let run = run_filter(&out, config.filter_config(), init).unwrap();
        assert!(run.reports.iter().filter(|r| r.updated).count() > 150);
        assert!(run.final_position_error() < 1e-6, "{}", run.final_position_error());
    }

    #[test]
    fn window_instances_are_well_posed() {
        let inst = random_window_instance(3, 4, 30, 2, 8, true).unwrap();
        assert_eq!(inst.state.clones.len(), 4);
        assert!(inst.landmarks.len() >= 30);
        for lm in inst.landmarks.values() {
            assert!(lm.distinct_clones() >= 2);
            assert!(lm.track.len() >= 2);
            assert!(lm.cov.cholesky().is_some());
        }
        assert_eq!(inst.landmarks.len(), 33);
        assert_eq!(inst.state.clones[0].p, inst.state.clones[1].p);
        let again = random_window_instance(3, 4, 30, 2, 8, true).unwrap();
        assert_eq!(inst.state.cov, again.state.cov);
        assert!(random_window_instance(3, 1, 30, 2, 8, false).is_err());
    }
}

