//! The full estimator cycle: IMU buffering and propagation, clone
//! augmentation, landmark lifecycle, the Schur update, per-landmark updates
//! and sliding-window maintenance.

use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::{DMatrix, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PinholeCamera;
use crate::landmark_solver::{
    clamp_covariance, ekf_update_landmark, gauss_newton_refine, has_positive_depth, split_landmark_system,
};
use crate::measurement::{observation_chi2, stack, triangulate, Observation, TriangulationConfig, CHI2_2DOF_95};
use crate::propagation::{propagate, ImuSample, NoiseParams};
use crate::schur_update::{ekf_update_pose, marginalize_with_retry, DEFAULT_C3_EPS};
use crate::state::{
    ImuState, Landmark, LandmarkMap, LandmarkStatus, SlidingWindowState, TrackEntry, BIAS_ACC, BIAS_GYRO, IMU_DIM,
    POS, THETA, VEL,
};

/// Longest single propagation step; longer IMU gaps are subdivided.
const MAX_STEP: f64 = 0.05;

/// Timestamps closer than this are treated as equal.
const TIME_EPS: f64 = 1e-9;

/// Eigenvalue bounds for a freshly triangulated landmark covariance, m².
const LANDMARK_COV_FLOOR: f64 = 1e-6;
const LANDMARK_COV_CAP: f64 = 1e2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub max_keyframes: usize,
    pub max_temporal: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    /// χ² threshold for a single 2-dof observation.
    pub chi2: f64,
    /// Minimum ray angle for triangulation, radians.
    pub min_parallax: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyframeConfig {
    /// Average image displacement to the latest keyframe, pixels.
    pub parallax_px: f64,
    pub min_tracked_landmarks: usize,
    /// Largest rotation to the nearest co-visible keyframe, radians.
    pub max_rotation: f64,
    /// Largest translation to the nearest co-visible keyframe, meters.
    pub max_translation: f64,
}

/// Initial standard deviations of the IMU error state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    /// Number of IMU samples averaged for the gravity-aligned start.
    pub samples: usize,
    pub sigma_theta: f64,
    pub sigma_p: f64,
    pub sigma_v: f64,
    pub sigma_ba: f64,
    pub sigma_bg: f64,
}

impl InitConfig {
    pub fn covariance(&self) -> DMatrix<f64> {
        let mut cov = DMatrix::zeros(IMU_DIM, IMU_DIM);
        for (offset, sigma) in [
            (THETA, self.sigma_theta),
            (POS, self.sigma_p),
            (VEL, self.sigma_v),
            (BIAS_ACC, self.sigma_ba),
            (BIAS_GYRO, self.sigma_bg),
        ] {
            for i in 0..3 {
                cov[(offset + i, offset + i)] = sigma * sigma;
            }
        }
        cov
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkSolverKind {
    /// Per-landmark EKF update on the decoupled 3x3 systems.
    Ekf,
    /// Gauss-Newton re-solve with the updated poses held fixed.
    GaussNewton,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub noise: NoiseParams,
    pub cameras: Vec<PinholeCamera>,
    pub window: WindowConfig,
    pub gates: GateConfig,
    /// Feature noise standard deviation, pixels.
    pub pixel_sigma: f64,
    pub keyframe: KeyframeConfig,
    pub init: InitConfig,
    pub landmark_solver: LandmarkSolverKind,
    pub c3_eps: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            noise: NoiseParams::default(),
            cameras: vec![PinholeCamera::forward_looking(458.0, 457.0, 752, 480)],
            window: WindowConfig { max_keyframes: 2, max_temporal: 2 },
            gates: GateConfig { chi2: CHI2_2DOF_95, min_parallax: 1f64.to_radians() },
            pixel_sigma: 1.0,
            keyframe: KeyframeConfig {
                parallax_px: 15.0,
                min_tracked_landmarks: 20,
                max_rotation: 15f64.to_radians(),
                max_translation: 0.5,
            },
            init: InitConfig {
                samples: 50,
                sigma_theta: 1f64.to_radians(),
                sigma_p: 1e-3,
                sigma_v: 0.05,
                sigma_ba: 0.02,
                sigma_bg: 2e-3,
            },
            landmark_solver: LandmarkSolverKind::Ekf,
            c3_eps: DEFAULT_C3_EPS,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        if self.cameras.is_empty() {
            return Err(Error::InvalidConfig("at least one camera is required".into()));
        }
        for cam in &self.cameras {
            cam.validate()?;
        }
        let positive = [
            ("gates.chi2", self.gates.chi2),
            ("gates.min_parallax", self.gates.min_parallax),
            ("pixel_sigma", self.pixel_sigma),
            ("keyframe.parallax_px", self.keyframe.parallax_px),
            ("keyframe.max_rotation", self.keyframe.max_rotation),
            ("keyframe.max_translation", self.keyframe.max_translation),
            ("c3_eps", self.c3_eps),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.window.max_keyframes == 0 || self.window.max_temporal == 0 {
            return Err(Error::InvalidConfig("window sizes must be positive".into()));
        }
        if self.keyframe.min_tracked_landmarks == 0 || self.init.samples == 0 {
            return Err(Error::InvalidConfig("counts must be positive".into()));
        }
        let sigmas = [
            self.init.sigma_theta,
            self.init.sigma_p,
            self.init.sigma_v,
            self.init.sigma_ba,
            self.init.sigma_bg,
        ];
        if !sigmas.iter().all(|s| s.is_finite() && *s >= 0.0) {
            return Err(Error::InvalidConfig("initial sigmas must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Feature noise in normalized image coordinates.
    pub fn normalized_sigma(&self) -> f64 {
        self.cameras[0].normalized_sigma(self.pixel_sigma)
    }
}

/// One feature measurement of a frame, in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureObservation {
    pub landmark_id: u64,
    pub camera: usize,
    pub z: Vector2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyframeReason {
    NoKeyframe,
    Parallax,
    FewTracked,
    PoseGap,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframeDecision {
    pub is_keyframe: bool,
    pub reason: Option<KeyframeReason>,
    /// Mean image displacement to the latest keyframe, pixels. Zero when no
    /// landmark is shared with it.
    pub avg_parallax_px: f64,
    pub tracked: usize,
}

/// Applies the keyframe rules to clone `current_id`: average parallax to the
/// latest keyframe at or above the threshold, fewer tracked landmarks than
/// the minimum, or the nearest co-visible keyframe outside the rotation or
/// translation range. Both thresholds are inclusive.
pub fn select_keyframe(
    state: &SlidingWindowState,
    landmarks: &LandmarkMap,
    current_id: u64,
    cams: &[PinholeCamera],
    config: &KeyframeConfig,
) -> KeyframeDecision {
    let keyframes: Vec<_> = state.clones.iter().filter(|c| c.is_keyframe && c.id != current_id).collect();
    let current = state.clone_by_id(current_id);

    let mut tracked = 0;
    let mut parallax_sum = 0.0;
    let mut parallax_count = 0usize;
    let mut covisible: Vec<u64> = Vec::new();
    let latest_kf = keyframes.iter().map(|c| c.id).max();
    for lm in landmarks.values().filter(|l| l.status != LandmarkStatus::Rejected) {
        let now: Vec<&TrackEntry> = lm.track.iter().filter(|e| e.clone_id == current_id).collect();
        if now.is_empty() {
            continue;
        }
        if lm.track.iter().any(|e| e.clone_id != current_id) {
            tracked += 1;
        }
        for e in &lm.track {
            if keyframes.iter().any(|k| k.id == e.clone_id) && !covisible.contains(&e.clone_id) {
                covisible.push(e.clone_id);
            }
        }
        if let Some(kf) = latest_kf {
            for cur in &now {
                if let Some(old) = lm.track.iter().find(|e| e.clone_id == kf && e.camera == cur.camera) {
                    let f = cams.get(cur.camera).map_or(1.0, |c| c.fx);
                    parallax_sum += (cur.z - old.z).norm() * f;
                    parallax_count += 1;
                }
            }
        }
    }
    let avg_parallax_px = if parallax_count > 0 { parallax_sum / parallax_count as f64 } else { 0.0 };
    let decide = |reason: Option<KeyframeReason>| KeyframeDecision { is_keyframe: reason.is_some(), reason, avg_parallax_px, tracked };

    if keyframes.is_empty() {
        return decide(Some(KeyframeReason::NoKeyframe));
    }
    if avg_parallax_px >= config.parallax_px {
        return decide(Some(KeyframeReason::Parallax));
    }
    if tracked < config.min_tracked_landmarks {
        return decide(Some(KeyframeReason::FewTracked));
    }
    let Some(current) = current else {
        return decide(None);
    };
    let nearest = keyframes
        .iter()
        .filter(|k| covisible.contains(&k.id))
        .min_by(|a, b| (a.p - current.p).norm().total_cmp(&(b.p - current.p).norm()));
    let out_of_range = match nearest {
        None => true,
        Some(k) => {
            k.q.angle_to(&current.q) >= config.max_rotation || (k.p - current.p).norm() >= config.max_translation
        }
    };
    decide(out_of_range.then_some(KeyframeReason::PoseGap))
}

/// Wall time of each stage of a frame, seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTiming {
    pub propagate: f64,
    pub triangulate: f64,
    pub stack: f64,
    pub schur: f64,
    pub pose_update: f64,
    pub landmark_update: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterReport {
    pub t: f64,
    pub clone_id: u64,
    /// Norm of the pose correction, zero when no update ran.
    pub dx_norm: f64,
    pub updated: bool,
    pub landmarks_used: usize,
    pub rows_used: usize,
    pub triangulated: usize,
    pub gated_out: usize,
    pub rejected: usize,
    pub keyframe: KeyframeDecision,
    pub window_size: usize,
    pub timing: StageTiming,
}

#[derive(Debug, Clone)]
pub struct Filter {
    config: FilterConfig,
    state: Option<SlidingWindowState>,
    landmarks: LandmarkMap,
    init_buffer: Vec<ImuSample>,
    last_sample: Option<ImuSample>,
    temporal: VecDeque<u64>,
    keyframes: VecDeque<u64>,
    dropped_imu: usize,
}

impl Filter {
    /// Filter that initializes itself from the first `init.samples` IMU
    /// samples, assuming the platform is at rest.
    pub fn new(config: FilterConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: None,
            landmarks: LandmarkMap::new(),
            init_buffer: Vec::new(),
            last_sample: None,
            temporal: VecDeque::new(),
            keyframes: VecDeque::new(),
            dropped_imu: 0,
        })
    }

    /// Filter starting from a known state, e.g. a perturbed ground truth.
    /// The state must not contain clones.
    pub fn with_state(config: FilterConfig, state: SlidingWindowState) -> Result<Self> {
        if !state.clones.is_empty() {
            return Err(Error::InvalidConfig("initial state must not contain clones".into()));
        }
        let mut filter = Self::new(config)?;
        filter.state = Some(state);
        Ok(filter)
    }

    pub fn config(&self) -> &FilterConfig {
        &self.config
    }

    pub fn state(&self) -> Option<&SlidingWindowState> {
        self.state.as_ref()
    }

    pub fn landmarks(&self) -> &LandmarkMap {
        &self.landmarks
    }

    pub fn is_initialized(&self) -> bool {
        self.state.is_some()
    }

    /// IMU samples dropped for being out of order or non-finite.
    pub fn dropped_imu(&self) -> usize {
        self.dropped_imu
    }

    pub fn keyframe_ids(&self) -> Vec<u64> {
        self.keyframes.iter().copied().collect()
    }

    pub fn temporal_ids(&self) -> Vec<u64> {
        self.temporal.iter().copied().collect()
    }

    /// Buffers or integrates one IMU sample. Between consecutive samples the
    /// mean of the two readings is held constant.
    pub fn process_imu(&mut self, sample: ImuSample) -> Result<()> {
        if !sample.is_finite() {
            self.dropped_imu += 1;
            return Err(Error::NonFiniteInput);
        }
        if self.last_sample.is_none() {
            if let Some(state) = &self.state {
                // a sample at the start time of a given state only seeds the hold
                if (sample.t - state.imu.t).abs() <= TIME_EPS {
                    self.last_sample = Some(sample);
                    return Ok(());
                }
            }
        }
        let previous = self.last_sample.map(|s| s.t).or(self.state.as_ref().map(|s| s.imu.t));
        if let Some(previous) = previous {
            if sample.t <= previous {
                self.dropped_imu += 1;
                return Err(Error::NonMonotonicTime { previous, t: sample.t });
            }
        }
        if self.state.is_none() {
            self.init_buffer.push(sample);
            self.last_sample = Some(sample);
            if self.init_buffer.len() >= self.config.init.samples {
                self.initialize_at_rest()?;
            }
            return Ok(());
        }
        let hold = match self.last_sample {
            Some(last) => ImuSample::new(sample.t, (last.gyro + sample.gyro) * 0.5, (last.accel + sample.accel) * 0.5),
            None => sample,
        };
        self.integrate_to(&hold, sample.t)?;
        self.last_sample = Some(sample);
        Ok(())
    }

    fn initialize_at_rest(&mut self) -> Result<()> {
        let n = self.init_buffer.len() as f64;
        let acc = self.init_buffer.iter().map(|s| s.accel).sum::<Vector3<f64>>() / n;
        let up = -self.config.noise.gravity;
        let q = UnitQuaternion::rotation_between(&acc, &up)
            .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI));
        let t = self.init_buffer.last().map_or(0.0, |s| s.t);
        let imu = ImuState { q, ..ImuState::at_rest(t) };
        self.state = Some(SlidingWindowState::new(imu, self.config.init.covariance())?);
        self.init_buffer.clear();
        Ok(())
    }

    fn integrate_to(&mut self, hold: &ImuSample, t: f64) -> Result<()> {
        let noise = self.config.noise;
        let state = self.state.as_mut().ok_or(Error::NotInitialized)?;
        let span = t - state.imu.t;
        if span <= TIME_EPS {
            return Ok(());
        }
        let steps = (span / MAX_STEP).ceil().max(1.0) as usize;
        let dt = span / steps as f64;
        for _ in 0..steps {
            propagate(state, hold, dt, &noise)?;
        }
        state.imu.t = t;
        Ok(())
    }

    /// Runs one camera frame through the full update cycle.
    pub fn process_frame(&mut self, features: &[FeatureObservation], t: f64) -> Result<FilterReport> {
        let start = Instant::now();
        let mut timing = StageTiming::default();
        let state_t = self.state.as_ref().ok_or(Error::NotInitialized)?.imu.t;
        if t < state_t - TIME_EPS {
            return Err(Error::NonMonotonicTime { previous: state_t, t });
        }
        if t > state_t + TIME_EPS {
            let hold = self.last_sample.ok_or(Error::NotInitialized)?;
            self.integrate_to(&hold, t)?;
        }
        timing.propagate = start.elapsed().as_secs_f64();

        let u = self.config.normalized_sigma();
        let cams = self.config.cameras.clone();
        let state = self.state.as_mut().ok_or(Error::NotInitialized)?;
        let clone_id = state.augment();

        // attach the new observations
        let mut fresh: Vec<(u64, TrackEntry)> = Vec::with_capacity(features.len());
        for f in features {
            if f.camera >= cams.len() || !f.z.iter().all(|v| v.is_finite()) {
                continue;
            }
            fresh.push((f.landmark_id, TrackEntry { clone_id, camera: f.camera, z: f.z }));
        }
        let mut gated_out = 0;
        for (id, entry) in fresh {
            let lm = self.landmarks.entry(id).or_insert_with(|| Landmark::candidate(id));
            if lm.status == LandmarkStatus::Estimating {
                let obs = Observation::from_track(id, &entry, u);
                match observation_chi2(&obs, state, lm, &cams) {
                    Ok(chi2) if chi2 <= self.config.gates.chi2 => {}
                    _ => {
                        gated_out += 1;
                        continue;
                    }
                }
            }
            lm.track.push(entry);
        }

        // triangulate candidates seen from at least two clones
        let t_tri = Instant::now();
        let tri_config = TriangulationConfig { min_parallax: self.config.gates.min_parallax, ..Default::default() };
        let mut triangulated = 0;
        for lm in self.landmarks.values_mut() {
            if lm.status != LandmarkStatus::Candidate || lm.distinct_clones() < 2 {
                continue;
            }
            let Ok((p, cov)) = triangulate(&lm.track, state, &cams, u, &tri_config) else {
                continue;
            };
            lm.p_g = p;
            lm.cov = clamp_covariance(&cov, LANDMARK_COV_FLOOR, LANDMARK_COV_CAP);
            lm.status = LandmarkStatus::Estimating;
            triangulated += 1;
            let before = lm.track.len();
            let gate = self.config.gates.chi2;
            let snapshot = lm.clone();
            lm.track.retain(|e| {
                observation_chi2(&Observation::from_track(snapshot.id, e, u), state, &snapshot, &cams)
                    .is_ok_and(|c| c <= gate)
            });
            gated_out += before - lm.track.len();
        }
        timing.triangulate = t_tri.elapsed().as_secs_f64();

        // Schur update over every estimated landmark in the window
        let t_stack = Instant::now();
        let outcome = stack(
            state,
            self.landmarks.values().filter(|l| l.status == LandmarkStatus::Estimating),
            &cams,
            u,
        );
        let mut model = outcome.model;
        timing.stack = t_stack.elapsed().as_secs_f64();

        let mut dx_norm = 0.0;
        let mut updated = false;
        let mut rejected = 0;
        let mut landmarks_used = 0;
        let mut rows_used = 0;
        if !model.is_empty() {
            let t_schur = Instant::now();
            let (sys, prm, singular) = marginalize_with_retry(&mut model, self.config.c3_eps)?;
            timing.schur = t_schur.elapsed().as_secs_f64();
            for id in singular {
                if let Some(lm) = self.landmarks.get_mut(&id) {
                    lm.status = LandmarkStatus::Rejected;
                    rejected += 1;
                }
            }
            landmarks_used = model.num_landmarks();
            rows_used = model.num_rows();

            let t_pose = Instant::now();
            let dx = ekf_update_pose(state, &prm)?;
            timing.pose_update = t_pose.elapsed().as_secs_f64();
            dx_norm = dx.norm();
            updated = true;

            let t_lm = Instant::now();
            match self.config.landmark_solver {
                LandmarkSolverKind::Ekf => {
                    for res in split_landmark_system(&sys, &dx) {
                        if let Some(lm) = self.landmarks.get_mut(&res.landmark_id) {
                            // failures flag the landmark as rejected
                            let _ = ekf_update_landmark(lm, &res);
                        }
                    }
                }
                LandmarkSolverKind::GaussNewton => {
                    for id in &sys.landmark_ids {
                        if let Some(lm) = self.landmarks.get_mut(id) {
                            if gauss_newton_refine(lm, state, &cams, u, tri_config.max_iterations).is_err() {
                                lm.status = LandmarkStatus::Rejected;
                            }
                        }
                    }
                }
            }
            for id in &sys.landmark_ids {
                if let Some(lm) = self.landmarks.get_mut(id) {
                    if lm.status == LandmarkStatus::Estimating && !has_positive_depth(lm, state, &cams) {
                        lm.status = LandmarkStatus::Rejected;
                    }
                    if lm.status == LandmarkStatus::Rejected {
                        rejected += 1;
                    }
                }
            }
            timing.landmark_update = t_lm.elapsed().as_secs_f64();
        }

        let keyframe = select_keyframe(state, &self.landmarks, clone_id, &cams, &self.config.keyframe);
        if let Some(c) = state.clones.iter_mut().find(|c| c.id == clone_id) {
            c.is_keyframe = keyframe.is_keyframe;
        }
        self.temporal.push_back(clone_id);
        self.maintain_window()?;
        self.landmarks
            .retain(|_, l| l.status != LandmarkStatus::Rejected && !l.track.is_empty());

        timing.total = start.elapsed().as_secs_f64();
        let window_size = self.state.as_ref().map_or(0, |s| s.clones.len());
        Ok(FilterReport {
            t,
            clone_id,
            dx_norm,
            updated,
            landmarks_used,
            rows_used,
            triangulated,
            gated_out,
            rejected,
            keyframe,
            window_size,
            timing,
        })
    }

    /// Promotes or marginalizes the oldest temporal clone once the temporal
    /// budget is exceeded, then drops the oldest keyframes beyond their budget.
    fn maintain_window(&mut self) -> Result<()> {
        let state = self.state.as_mut().ok_or(Error::NotInitialized)?;
        while self.temporal.len() > self.config.window.max_temporal {
            let Some(id) = self.temporal.pop_front() else { break };
            if state.clone_by_id(id).is_some_and(|c| c.is_keyframe) {
                self.keyframes.push_back(id);
            } else {
                state.marginalize_clone(id, &mut self.landmarks)?;
            }
        }
        while self.keyframes.len() > self.config.window.max_keyframes {
            let Some(id) = self.keyframes.pop_front() else { break };
            state.marginalize_clone(id, &mut self.landmarks)?;
        }
        Ok(())
    }
}
