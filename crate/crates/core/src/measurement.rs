//! Reprojection residuals, their Jacobians, the stacked residual model and
//! landmark triangulation.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, SymmetricEigen, Vector2, Vector3, SMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project, projection_jacobian, skew, PinholeCamera};
use crate::state::{Landmark, SlidingWindowState, TrackEntry};

pub type Matrix2x6 = SMatrix<f64, 2, 6>;

/// 95% quantile of the χ² distribution with 2 degrees of freedom.
pub const CHI2_2DOF_95: f64 = 5.991464547107979;

/// Largest accepted condition number of a landmark's `J_fᵀJ_f`.
pub const MAX_LANDMARK_CONDITION: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub landmark_id: u64,
    pub clone_id: u64,
    pub camera: usize,
    /// Normalized image coordinates.
    pub z: Vector2<f64>,
    /// Noise standard deviation in normalized units.
    pub u: f64,
}

impl Observation {
    pub fn from_track(landmark_id: u64, entry: &TrackEntry, u: f64) -> Self {
        Self {
            landmark_id,
            clone_id: entry.clone_id,
            camera: entry.camera,
            z: entry.z,
            u,
        }
    }
}

/// Residual and Jacobians of a single observation. `j_pose` acts on the
/// `(θ, p)` error of the observing clone.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationJacobians {
    pub clone_index: usize,
    pub r: Vector2<f64>,
    pub j_pose: Matrix2x6,
    pub j_landmark: Matrix2x3<f64>,
}

fn camera(cams: &[PinholeCamera], index: usize) -> Result<&PinholeCamera> {
    cams.get(index).ok_or_else(|| Error::InvalidConfig(format!("no camera with index {index}")))
}

/// Linearizes `z = π(ᶜp_f)` at the current clone and landmark estimates.
pub fn residual_and_jacobians(
    obs: &Observation,
    state: &SlidingWindowState,
    p_g: &Vector3<f64>,
    cams: &[PinholeCamera],
) -> Result<ObservationJacobians> {
    let clone_index = state.clone_index(obs.clone_id).ok_or(Error::UnknownClone(obs.clone_id))?;
    let clone = &state.clones[clone_index];
    let cam = camera(cams, obs.camera)?;
    let r_gi = clone.q.to_rotation_matrix().into_inner();
    let p_i_f = r_gi.transpose() * (p_g - clone.p);
    let r_ci = cam.r_ic.transpose();
    let p_c = r_ci * (p_i_f - cam.p_ic);
    let z_hat = project(&p_c)?;
    let j_proj = projection_jacobian(&p_c)?;
    let r_cg = r_ci * r_gi.transpose();

    let mut j_pose = Matrix2x6::zeros();
    j_pose.fixed_view_mut::<2, 3>(0, 0).copy_from(&(j_proj * r_ci * skew(&p_i_f) * r_gi.transpose()));
    j_pose.fixed_view_mut::<2, 3>(0, 3).copy_from(&(-(j_proj * r_cg)));
    Ok(ObservationJacobians {
        clone_index,
        r: obs.z - z_hat,
        j_pose,
        j_landmark: j_proj * r_cg,
    })
}

/// Rows contributed by one landmark, in clone-then-camera order.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkBlock {
    pub landmark_id: u64,
    pub rows: Vec<ObservationJacobians>,
}

/// `r = [J_x J_f][X̃; p̃_f] + n` with `n ~ N(0, u²I)`.
///
/// `J_x` is stored sparsely: every 2-row block only touches its clone's six
/// columns. `J_f` is block-diagonal by construction, one 3-column block per
/// landmark in `blocks` order.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedResidualModel {
    pub state_dim: usize,
    pub blocks: Vec<LandmarkBlock>,
    pub u: f64,
}

impl StackedResidualModel {
    pub fn num_rows(&self) -> usize {
        2 * self.blocks.iter().map(|b| b.rows.len()).sum::<usize>()
    }

    pub fn num_landmarks(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.iter().all(|b| b.rows.is_empty())
    }

    /// Column block of a landmark in `J_f`.
    pub fn landmark_index(&self, id: u64) -> Option<usize> {
        self.blocks.iter().position(|b| b.landmark_id == id)
    }

    pub fn remove_landmark(&mut self, id: u64) -> bool {
        let before = self.blocks.len();
        self.blocks.retain(|b| b.landmark_id != id);
        self.blocks.len() != before
    }

    pub fn landmark_ids(&self) -> Vec<u64> {
        self.blocks.iter().map(|b| b.landmark_id).collect()
    }

    fn rows(&self) -> impl Iterator<Item = (usize, &ObservationJacobians)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(l, b)| b.rows.iter().map(move |row| (l, row)))
    }

    pub fn residual(&self) -> DVector<f64> {
        let mut r = DVector::zeros(self.num_rows());
        for (k, (_, row)) in self.rows().enumerate() {
            r.fixed_rows_mut::<2>(2 * k).copy_from(&row.r);
        }
        r
    }

    pub fn jx_dense(&self) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.num_rows(), self.state_dim);
        for (k, (_, row)) in self.rows().enumerate() {
            let col = SlidingWindowState::clone_offset(row.clone_index);
            j.fixed_view_mut::<2, 6>(2 * k, col).copy_from(&row.j_pose);
        }
        j
    }

    pub fn jf_dense(&self) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.num_rows(), 3 * self.num_landmarks());
        for (k, (l, row)) in self.rows().enumerate() {
            j.fixed_view_mut::<2, 3>(2 * k, 3 * l).copy_from(&row.j_landmark);
        }
        j
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackOutcome {
    pub model: StackedResidualModel,
    /// Landmarks left out of the model and why.
    pub skipped: Vec<(u64, Error)>,
    /// Observations dropped because the point projected behind a camera.
    pub behind_camera: usize,
}

/// Stacks every observation of the given landmarks. Output order is landmark
/// id, then clone, then camera, independent of the input order.
pub fn stack<'a>(
    state: &SlidingWindowState,
    landmarks: impl IntoIterator<Item = &'a Landmark>,
    cams: &[PinholeCamera],
    u: f64,
) -> StackOutcome {
    let mut lms: Vec<&Landmark> = landmarks.into_iter().collect();
    lms.sort_by_key(|l| l.id);
    let mut blocks = Vec::with_capacity(lms.len());
    let mut skipped = Vec::new();
    let mut behind_camera = 0;
    for lm in lms {
        let mut entries: Vec<(usize, &TrackEntry)> = lm
            .track
            .iter()
            .filter_map(|e| state.clone_index(e.clone_id).map(|i| (i, e)))
            .collect();
        entries.sort_by_key(|(i, e)| (*i, e.camera));
        let mut rows = Vec::with_capacity(entries.len());
        for (_, entry) in entries {
            let obs = Observation::from_track(lm.id, entry, u);
            match residual_and_jacobians(&obs, state, &lm.p_g, cams) {
                Ok(row) => rows.push(row),
                Err(Error::BehindCamera { .. }) => behind_camera += 1,
                Err(e) => {
                    log::warn!("landmark {}: {e}", lm.id);
                }
            }
        }
        let mut clones: Vec<usize> = rows.iter().map(|r| r.clone_index).collect();
        clones.dedup();
        if rows.len() < 2 || clones.len() < 2 {
            skipped.push((lm.id, Error::InsufficientTrack(lm.id)));
            continue;
        }
        blocks.push(LandmarkBlock { landmark_id: lm.id, rows });
    }
    StackOutcome {
        model: StackedResidualModel { state_dim: state.dim(), blocks, u },
        skipped,
        behind_camera,
    }
}

/// Squared Mahalanobis distance of one observation's residual, using the
/// marginal covariance `J_A P_cc J_Aᵀ + J_f P_f J_fᵀ + u²I`.
pub fn observation_chi2(
    obs: &Observation,
    state: &SlidingWindowState,
    lm: &Landmark,
    cams: &[PinholeCamera],
) -> Result<f64> {
    let row = residual_and_jacobians(obs, state, &lm.p_g, cams)?;
    let o = SlidingWindowState::clone_offset(row.clone_index);
    let p_cc = state.cov.fixed_view::<6, 6>(o, o).into_owned();
    let s = row.j_pose * p_cc * row.j_pose.transpose()
        + row.j_landmark * lm.cov * row.j_landmark.transpose()
        + Matrix2::identity() * (obs.u * obs.u);
    let s_inv = s.try_inverse().ok_or(Error::InnovationNotInvertible)?;
    Ok((row.r.transpose() * s_inv * row.r)[0])
}

/// Largest angle between world-frame viewing rays of a track.
pub fn max_parallax(track: &[TrackEntry], state: &SlidingWindowState, cams: &[PinholeCamera]) -> Result<f64> {
    let mut rays = Vec::with_capacity(track.len());
    for e in track {
        let clone = state.clone_by_id(e.clone_id).ok_or(Error::UnknownClone(e.clone_id))?;
        let (r_gc, _) = camera(cams, e.camera)?.pose_in_world(&clone.q, &clone.p);
        rays.push((r_gc * Vector3::new(e.z.x, e.z.y, 1.0)).normalize());
    }
    let mut best = 0.0f64;
    for i in 0..rays.len() {
        for j in (i + 1)..rays.len() {
            best = best.max(rays[i].angle(&rays[j]));
        }
    }
    Ok(best)
}

/// Triangulation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriangulationConfig {
    /// Minimum ray angle, radians.
    pub min_parallax: f64,
    pub max_iterations: usize,
}

impl Default for TriangulationConfig {
    fn default() -> Self {
        Self {
            min_parallax: 1f64.to_radians(),
            max_iterations: 5,
        }
    }
}

/// Linear triangulation refined by a few Gauss-Newton steps. Returns the
/// point and its covariance `u² (J_fᵀJ_f)⁻¹`.
pub fn triangulate(
    track: &[TrackEntry],
    state: &SlidingWindowState,
    cams: &[PinholeCamera],
    u: f64,
    config: &TriangulationConfig,
) -> Result<(Vector3<f64>, Matrix3<f64>)> {
    // a single ray has no parallax
    let parallax = max_parallax(track, state, cams)?;
    if parallax < config.min_parallax {
        return Err(Error::LowParallax(parallax));
    }

    // camera poses as (R_cg, t) with p_c = R_cg p_g + t
    let mut poses = Vec::with_capacity(track.len());
    for e in track {
        let clone = state.clone_by_id(e.clone_id).ok_or(Error::UnknownClone(e.clone_id))?;
        let (r_gc, p_gc) = camera(cams, e.camera)?.pose_in_world(&clone.q, &clone.p);
        let r_cg = r_gc.transpose();
        poses.push((r_cg, -(r_cg * p_gc), e.z));
    }

    let mut a = DMatrix::zeros(2 * poses.len(), 3);
    let mut b = DVector::zeros(2 * poses.len());
    for (k, (r, t, z)) in poses.iter().enumerate() {
        for (axis, zc) in [(0, z.x), (1, z.y)] {
            let row = r.row(axis) - r.row(2) * zc;
            a.row_mut(2 * k + axis).copy_from(&row);
            b[2 * k + axis] = -(t[axis] - zc * t[2]);
        }
    }
    let svd = a.svd(true, true);
    let sol = svd.solve(&b, 1e-14).map_err(|_| Error::IllConditioned(f64::INFINITY))?;
    let mut p = Vector3::new(sol[0], sol[1], sol[2]);

    let normal = |p: &Vector3<f64>| -> Result<(Matrix3<f64>, Vector3<f64>)> {
        let mut h = Matrix3::zeros();
        let mut g = Vector3::zeros();
        for (r, t, z) in &poses {
            let p_c = r * p + t;
            let j = projection_jacobian(&p_c)? * r;
            let res = z - project(&p_c)?;
            h += j.transpose() * j;
            g += j.transpose() * res;
        }
        Ok((h, g))
    };

    for _ in 0..config.max_iterations {
        let (h, g) = normal(&p)?;
        let step = h.cholesky().ok_or(Error::IllConditioned(f64::INFINITY))?.solve(&g);
        p += step;
        if step.norm() < 1e-12 * (1.0 + p.norm()) {
            break;
        }
    }
    let (h, _) = normal(&p)?;
    let eig = SymmetricEigen::new(h).eigenvalues;
    let cond = eig.max() / eig.min();
    if !(eig.min() > 0.0) || cond > MAX_LANDMARK_CONDITION {
        return Err(Error::IllConditioned(cond));
    }
    let cov = h.try_inverse().ok_or(Error::IllConditioned(cond))? * (u * u);
    Ok((p, (cov + cov.transpose()) * 0.5))
}
