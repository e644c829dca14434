//! Nominal state, error covariance, stochastic cloning and clone removal.
//!
//! Covariance layout: `[θ, p, v, b_a, b_g]` for the IMU (15), followed by
//! `[θ, p]` for each cloned pose (6) in window order.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{quat_error_compose, Quat};

pub const IMU_DIM: usize = 15;
pub const CLONE_DIM: usize = 6;

pub const THETA: usize = 0;
pub const POS: usize = 3;
pub const VEL: usize = 6;
pub const BIAS_ACC: usize = 9;
pub const BIAS_GYRO: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImuState {
    /// Body-to-global orientation.
    pub q: Quat,
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub ba: Vector3<f64>,
    pub bg: Vector3<f64>,
    pub t: f64,
}

impl ImuState {
    pub fn at_rest(t: f64) -> Self {
        Self {
            q: Quat::identity(),
            p: Vector3::zeros(),
            v: Vector3::zeros(),
            ba: Vector3::zeros(),
            bg: Vector3::zeros(),
            t,
        }
    }

    /// Applies a 15-dim error-state correction.
    pub fn correct(&mut self, dx: &[f64]) {
        let d = |i: usize| Vector3::new(dx[i], dx[i + 1], dx[i + 2]);
        self.q = quat_error_compose(&d(THETA), &self.q);
        self.p += d(POS);
        self.v += d(VEL);
        self.ba += d(BIAS_ACC);
        self.bg += d(BIAS_GYRO);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClonePose {
    pub id: u64,
    pub q: Quat,
    pub p: Vector3<f64>,
    pub t: f64,
    pub is_keyframe: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LandmarkStatus {
    Candidate,
    Estimating,
    Rejected,
}

/// One observation of a landmark from a cloned pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackEntry {
    pub clone_id: u64,
    pub camera: usize,
    /// Normalized image coordinates.
    pub z: Vector2<f64>,
}

/// A landmark with its own independent 3x3 covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: u64,
    pub p_g: Vector3<f64>,
    pub cov: Matrix3<f64>,
    pub track: Vec<TrackEntry>,
    pub status: LandmarkStatus,
}

impl Landmark {
    pub fn candidate(id: u64) -> Self {
        Self {
            id,
            p_g: Vector3::zeros(),
            cov: Matrix3::zeros(),
            track: Vec::new(),
            status: LandmarkStatus::Candidate,
        }
    }

    /// Number of distinct clones observing this landmark.
    pub fn distinct_clones(&self) -> usize {
        let mut ids: Vec<u64> = self.track.iter().map(|e| e.clone_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    pub fn prune_clone(&mut self, clone_id: u64) {
        self.track.retain(|e| e.clone_id != clone_id);
    }
}

pub type LandmarkMap = BTreeMap<u64, Landmark>;

/// IMU state plus the cloned poses of the sliding window and the joint
/// error covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlidingWindowState {
    pub imu: ImuState,
    pub clones: Vec<ClonePose>,
    pub cov: DMatrix<f64>,
    next_clone_id: u64,
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let a = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = a;
            m[(j, i)] = a;
        }
    }
}

impl SlidingWindowState {
    pub fn new(imu: ImuState, imu_cov: DMatrix<f64>) -> Result<Self> {
        if imu_cov.nrows() != IMU_DIM || imu_cov.ncols() != IMU_DIM {
            return Err(Error::DimensionMismatch {
                expected: IMU_DIM,
                actual: imu_cov.nrows(),
            });
        }
        let mut cov = imu_cov;
        symmetrize(&mut cov);
        Ok(Self {
            imu,
            clones: Vec::new(),
            cov,
            next_clone_id: 0,
        })
    }

    pub fn dim(&self) -> usize {
        IMU_DIM + CLONE_DIM * self.clones.len()
    }

    pub fn clone_index(&self, clone_id: u64) -> Option<usize> {
        self.clones.iter().position(|c| c.id == clone_id)
    }

    pub fn clone_by_id(&self, clone_id: u64) -> Option<&ClonePose> {
        self.clones.iter().find(|c| c.id == clone_id)
    }

    /// First covariance row of the clone at window position `index`.
    pub fn clone_offset(index: usize) -> usize {
        IMU_DIM + CLONE_DIM * index
    }

    /// Id the next call to [`augment`](Self::augment) will assign.
    pub fn next_clone_id(&self) -> u64 {
        self.next_clone_id
    }

    /// Clones the current IMU pose into the window and returns its id.
    pub fn augment(&mut self) -> u64 {
        let n = self.dim();
        let mut cov = DMatrix::zeros(n + CLONE_DIM, n + CLONE_DIM);
        cov.view_mut((0, 0), (n, n)).copy_from(&self.cov);
        // J_a selects the IMU (θ, p) rows, so J_a P and J_a P J_aᵀ are plain copies.
        let p21 = self.cov.rows(0, CLONE_DIM).into_owned();
        cov.view_mut((n, 0), (CLONE_DIM, n)).copy_from(&p21);
        cov.view_mut((0, n), (n, CLONE_DIM)).copy_from(&p21.transpose());
        let p22 = self.cov.view((0, 0), (CLONE_DIM, CLONE_DIM)).into_owned();
        cov.view_mut((n, n), (CLONE_DIM, CLONE_DIM)).copy_from(&p22);
        symmetrize(&mut cov);
        self.cov = cov;

        let id = self.next_clone_id;
        self.next_clone_id += 1;
        self.clones.push(ClonePose {
            id,
            q: self.imu.q,
            p: self.imu.p,
            t: self.imu.t,
            is_keyframe: false,
        });
        id
    }

    /// Removes a clone from the window. Marginalizing a jointly Gaussian
    /// subvector is deletion of its rows and columns. Any landmark tracks
    /// referencing the clone are pruned.
    pub fn marginalize_clone(&mut self, clone_id: u64, landmarks: &mut LandmarkMap) -> Result<()> {
        let index = self.clone_index(clone_id).ok_or(Error::UnknownClone(clone_id))?;
        let start = Self::clone_offset(index);
        let cov = std::mem::replace(&mut self.cov, DMatrix::zeros(0, 0));
        let mut cov = cov.remove_rows(start, CLONE_DIM).remove_columns(start, CLONE_DIM);
        symmetrize(&mut cov);
        self.cov = cov;
        self.clones.remove(index);
        for lm in landmarks.values_mut() {
            lm.prune_clone(clone_id);
        }
        Ok(())
    }

    /// `x ← x ⊕ dx` over the IMU state and every clone.
    pub fn apply_correction(&mut self, dx: &DVector<f64>) -> Result<()> {
        if dx.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: dx.len(),
            });
        }
        self.imu.correct(&dx.as_slice()[..IMU_DIM]);
        for (i, clone) in self.clones.iter_mut().enumerate() {
            let o = Self::clone_offset(i);
            let dtheta = Vector3::new(dx[o], dx[o + 1], dx[o + 2]);
            clone.q = quat_error_compose(&dtheta, &clone.q);
            clone.p += Vector3::new(dx[o + 3], dx[o + 4], dx[o + 5]);
        }
        Ok(())
    }

    pub fn set_cov(&mut self, mut cov: DMatrix<f64>) -> Result<()> {
        if cov.nrows() != self.dim() || cov.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: cov.nrows(),
            });
        }
        symmetrize(&mut cov);
        self.cov = cov;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_psd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() * 0.1
    }

    fn min_eig_ok(p: &DMatrix<f64>) -> bool {
        let eig = SymmetricEigen::new(p.clone());
        eig.eigenvalues.min() >= -1e-10 * p.trace()
    }

    fn state_with(cov: DMatrix<f64>) -> SlidingWindowState {
        SlidingWindowState::new(ImuState::at_rest(0.0), cov).unwrap()
    }

    #[test]
    fn augment_diagonal() {
        let d: Vec<f64> = (1..=15).map(|i| i as f64).collect();
        let mut s = state_with(DMatrix::from_diagonal(&DVector::from_vec(d.clone())));
        s.augment();
        assert_eq!(s.dim(), 21);
        let block = s.cov.view((15, 15), (6, 6)).into_owned();
        assert_eq!(block, DMatrix::from_diagonal(&DVector::from_vec(d[..6].to_vec())));
        assert_eq!(s.cov.view((15, 0), (6, 15)).into_owned(), s.cov.view((0, 0), (6, 15)).into_owned());
    }

    #[test]
    fn augment_twice_cross_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_psd(15, &mut rng);
        let mut s = state_with(p.clone());
        s.augment();
        s.augment();
        let cross = s.cov.view((15, 21), (6, 6)).into_owned();
        assert!((cross - p.view((0, 0), (6, 6))).norm() < 1e-15);
    }

    #[test]
    fn augment_keeps_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let mut s = state_with(random_psd(15, &mut rng));
            for _ in 0..rng.random_range(1..4) {
                s.augment();
            }
            assert!(min_eig_ok(&s.cov));
            assert_eq!(s.cov, s.cov.transpose());
        }
    }

    #[test]
    fn augment_then_marginalize_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = state_with(random_psd(15, &mut rng));
        s.augment();
        s.augment();
        let before = s.cov.clone();
        let id = s.augment();
        let mut lms = LandmarkMap::new();
        s.marginalize_clone(id, &mut lms).unwrap();
        assert_eq!(s.cov, before);
    }

    #[test]
    fn marginalize_middle_clone() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = state_with(random_psd(15, &mut rng));
        for _ in 0..3 {
            s.augment();
        }
        s.cov = random_psd(33, &mut rng);
        symmetrize(&mut s.cov);
        let old = s.cov.clone();
        let mut lms = LandmarkMap::new();
        let mut lm = Landmark::candidate(9);
        for c in &s.clones {
            lm.track.push(TrackEntry { clone_id: c.id, camera: 0, z: Vector2::zeros() });
        }
        lms.insert(9, lm);
        let mid = s.clones[1].id;
        s.marginalize_clone(mid, &mut lms).unwrap();
        assert_eq!(s.dim(), 27);
        let keep: Vec<usize> = (0..21).chain(27..33).collect();
        for (a, &i) in keep.iter().enumerate() {
            for (b, &j) in keep.iter().enumerate() {
                assert_eq!(s.cov[(a, b)], old[(i, j)]);
            }
        }
        assert!(min_eig_ok(&s.cov));
        assert_eq!(lms[&9].track.len(), 2);
        assert!(lms[&9].track.iter().all(|e| e.clone_id != mid));
        assert_eq!(s.marginalize_clone(mid, &mut lms), Err(Error::UnknownClone(mid)));
    }

    #[test]
    fn zero_correction_is_noop() {
        let mut s = state_with(DMatrix::identity(15, 15));
        s.imu.q = Quat::from_euler_angles(0.1, 0.2, 0.3);
        s.augment();
        let before = s.clone();
        s.apply_correction(&DVector::zeros(21)).unwrap();
        assert_eq!(s.imu.p, before.imu.p);
        assert!((s.imu.q.into_inner() - before.imu.q.into_inner()).norm() < 1e-15);
        assert!(s.apply_correction(&DVector::zeros(20)).is_err());
    }

    #[test]
    fn theta_correction_composes_on_left() {
        let mut s = state_with(DMatrix::identity(15, 15));
        let mut dx = DVector::zeros(15);
        dx[0] = 2e-3;
        s.apply_correction(&dx).unwrap();
        let expected = nalgebra::Quaternion::new(1.0, 1e-3, 0.0, 0.0).normalize();
        assert!((s.imu.q.into_inner() - expected).norm() < 1e-15);
    }

    #[test]
    fn corrections_add_to_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for &scale in &[1e-3, 1e-5] {
            let mut s = state_with(DMatrix::identity(15, 15));
            s.imu.q = Quat::from_euler_angles(0.4, -0.2, 2.0);
            s.augment();
            let d1 = DVector::from_fn(21, |_, _| rng.random_range(-1.0..1.0) * scale);
            let d2 = DVector::from_fn(21, |_, _| rng.random_range(-1.0..1.0) * scale);
            let mut twice = s.clone();
            twice.apply_correction(&d1).unwrap();
            twice.apply_correction(&d2).unwrap();
            let mut once = s.clone();
            once.apply_correction(&(&d1 + &d2)).unwrap();
            let dq = twice.imu.q.angle_to(&once.imu.q);
            let dc = twice.clones[0].q.angle_to(&once.clones[0].q);
            assert!(dq < 10.0 * scale * scale && dc < 10.0 * scale * scale, "{dq} {dc}");
            assert!((twice.imu.p - once.imu.p).norm() < 1e-15);
        }
    }
}
