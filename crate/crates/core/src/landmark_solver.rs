//! Per-landmark EKF updates on the decoupled landmark systems.
//!
//! Once the pose correction `Δx` is known, each landmark sees the 3x3 model
//! `b2_i − C2_iᵀΔx = C3_i p̃_f + n`, `R = C3_i u²`, independent of every other
//! landmark and of the pose covariance.

use nalgebra::{DVector, Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{project, projection_jacobian, PinholeCamera};
use crate::schur_update::SchurSystem;
use crate::state::{Landmark, LandmarkStatus, SlidingWindowState};

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkResidual {
    pub landmark_id: u64,
    /// `b2_i − C2_iᵀ Δx`
    pub r: Vector3<f64>,
    pub c3: Matrix3<f64>,
    /// `C3_i u²`
    pub noise: Matrix3<f64>,
}

pub fn split_landmark_system(sys: &SchurSystem, dx: &DVector<f64>) -> Vec<LandmarkResidual> {
    let u2 = sys.u * sys.u;
    sys.landmark_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| LandmarkResidual {
            landmark_id: id,
            r: sys.b2[i] - sys.c2[i].transpose() * dx,
            c3: sys.c3[i],
            noise: sys.c3[i] * u2,
        })
        .collect()
}

/// `K = P_f C3 (C3 P_f C3 + C3 u²)⁻¹`, `Δp = K r`, Joseph update of `P_f`.
///
/// On a singular innovation the landmark is flagged `Rejected` and left
/// otherwise untouched.
pub fn ekf_update_landmark(lm: &mut Landmark, res: &LandmarkResidual) -> Result<Vector3<f64>> {
    let p = lm.cov;
    let innovation = res.c3 * p * res.c3 + res.noise;
    let innovation = (innovation + innovation.transpose()) * 0.5;
    let Some(chol) = innovation.cholesky() else {
        lm.status = LandmarkStatus::Rejected;
        return Err(Error::InnovationNotInvertible);
    };
    let gain = chol.solve(&(res.c3 * p)).transpose();
    let dp = gain * res.r;
    let i_kh = Matrix3::identity() - gain * res.c3;
    let post = i_kh * p * i_kh.transpose() + gain * res.noise * gain.transpose();
    if !dp.iter().chain(post.iter()).all(|v| v.is_finite()) {
        lm.status = LandmarkStatus::Rejected;
        return Err(Error::InnovationNotInvertible);
    }
    lm.p_g += dp;
    lm.cov = (post + post.transpose()) * 0.5;
    Ok(dp)
}

/// Clamps the eigenvalues of a landmark covariance into `[floor, cap]`.
pub fn clamp_covariance(cov: &Matrix3<f64>, floor: f64, cap: f64) -> Matrix3<f64> {
    let eig = SymmetricEigen::new((cov + cov.transpose()) * 0.5);
    let vals = eig.eigenvalues.map(|v| v.clamp(floor, cap));
    eig.eigenvectors * Matrix3::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// True when the landmark lies in front of every camera that observes it.
pub fn has_positive_depth(lm: &Landmark, state: &SlidingWindowState, cams: &[PinholeCamera]) -> bool {
    lm.track.iter().all(|e| match (state.clone_by_id(e.clone_id), cams.get(e.camera)) {
        (Some(c), Some(cam)) => cam.world_to_camera(&c.q, &c.p, &lm.p_g).z > 0.0,
        _ => true,
    })
}

/// Re-solves a landmark by Gauss-Newton with the poses held fixed, minimizing
/// its window reprojection errors plus the deviation from its current
/// estimate weighted by its covariance. The covariance is reset to the
/// inverse of the final information matrix.
///
/// This is the optimization-based alternative to [`ekf_update_landmark`].
pub fn gauss_newton_refine(
    lm: &mut Landmark,
    state: &SlidingWindowState,
    cams: &[PinholeCamera],
    u: f64,
    max_iterations: usize,
) -> Result<()> {
    let prior_mean = lm.p_g;
    let prior_info = lm.cov.try_inverse().filter(|m| m.iter().all(|v| v.is_finite())).unwrap_or_else(Matrix3::zeros);
    let w = 1.0 / (u * u);
    let mut p = lm.p_g;
    let mut info = prior_info;
    for _ in 0..max_iterations.max(1) {
        let mut h = prior_info;
        let mut g = prior_info * (prior_mean - p);
        for e in &lm.track {
            let (Some(c), Some(cam)) = (state.clone_by_id(e.clone_id), cams.get(e.camera)) else {
                continue;
            };
            let p_c = cam.world_to_camera(&c.q, &c.p, &p);
            let r_cg = cam.r_ic.transpose() * c.q.to_rotation_matrix().into_inner().transpose();
            let j = projection_jacobian(&p_c)? * r_cg;
            let r = e.z - project(&p_c)?;
            h += j.transpose() * j * w;
            g += j.transpose() * r * w;
        }
        info = h;
        let step = h.cholesky().ok_or(Error::IllConditioned(f64::INFINITY))?.solve(&g);
        p += step;
        if step.norm() < 1e-10 {
            break;
        }
    }
    lm.p_g = p;
    lm.cov = info.try_inverse().ok_or(Error::IllConditioned(f64::INFINITY))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn landmark(cov: Matrix3<f64>) -> Landmark {
        let mut lm = Landmark::candidate(1);
        lm.p_g = Vector3::new(1.0, 2.0, 3.0);
        lm.cov = cov;
        lm.status = LandmarkStatus::Estimating;
        lm
    }

    fn residual(r: Vector3<f64>, c3: Matrix3<f64>, u: f64) -> LandmarkResidual {
        LandmarkResidual { landmark_id: 1, r, c3, noise: c3 * u * u }
    }

    #[test]
    fn split_with_zero_dx_returns_gradient() {
        let sys = SchurSystem {
            landmark_ids: vec![4, 9],
            b1: DVector::zeros(21),
            b2: vec![Vector3::new(1.0, 2.0, 3.0), Vector3::new(-1.0, 0.5, 0.0)],
            c1: DMatrix::zeros(21, 21),
            c2: vec![nalgebra::MatrixXx3::from_element(21, 0.3); 2],
            c3: vec![Matrix3::identity(), Matrix3::identity() * 2.0],
            u: 0.1,
        };
        let parts = split_landmark_system(&sys, &DVector::zeros(21));
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].r, sys.b2[0]);
        assert_eq!(parts[1].landmark_id, 9);
        assert!((parts[1].noise - Matrix3::identity() * 0.02).norm() < 1e-15);

        let dx = DVector::from_element(21, 0.1);
        let parts = split_landmark_system(&sys, &dx);
        let expected = sys.b2[0] - Vector3::from_element(21.0 * 0.3 * 0.1);
        assert!((parts[0].r - expected).norm() < 1e-13);
    }

    #[test]
    fn zero_residual_keeps_position() {
        let mut lm = landmark(Matrix3::identity() * 0.5);
        let before = lm.clone();
        ekf_update_landmark(&mut lm, &residual(Vector3::zeros(), Matrix3::identity() * 4.0, 0.1)).unwrap();
        assert_eq!(lm.p_g, before.p_g);
        assert!(lm.cov.trace() <= before.cov.trace());
    }

    #[test]
    fn isotropic_gain() {
        let (c, p, u) = (3.0, 0.2, 0.5);
        let mut lm = landmark(Matrix3::identity() * p);
        let r = Vector3::new(0.3, -0.1, 0.2);
        let dp = ekf_update_landmark(&mut lm, &residual(r, Matrix3::identity() * c, u)).unwrap();
        let k = p / (c * p + u * u);
        assert!((dp - r * k).norm() < 1e-13);
    }

    #[test]
    fn infinite_prior_is_gauss_newton_step() {
        let c3 = Matrix3::new(4.0, 0.5, 0.1, 0.5, 2.0, 0.3, 0.1, 0.3, 0.05);
        let r = Vector3::new(0.02, -0.01, 0.004);
        let mut lm = landmark(Matrix3::identity() * 1e8);
        let dp = ekf_update_landmark(&mut lm, &residual(r, c3, 1e-3)).unwrap();
        let gn = c3.try_inverse().unwrap() * r;
        assert!((dp - gn).norm() < 1e-5 * gn.norm(), "{dp} vs {gn}");
    }

    #[test]
    fn singular_innovation_rejects() {
        let mut lm = landmark(Matrix3::identity());
        let res = residual(Vector3::x(), Matrix3::zeros(), 0.1);
        assert_eq!(ekf_update_landmark(&mut lm, &res), Err(Error::InnovationNotInvertible));
        assert_eq!(lm.status, LandmarkStatus::Rejected);
    }

    #[test]
    fn posterior_stays_psd() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let b = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let mut lm = landmark(a * a.transpose() + Matrix3::identity() * 1e-6);
            let c3 = b * b.transpose() + Matrix3::identity() * 1e-3;
            let r = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            ekf_update_landmark(&mut lm, &residual(r, c3, 0.05)).unwrap();
            assert_eq!(lm.cov, lm.cov.transpose());
            assert!(SymmetricEigen::new(lm.cov).eigenvalues.min() > -1e-12);
        }
    }

    #[test]
    fn clamping_bounds_eigenvalues() {
        let cov = Matrix3::from_diagonal(&Vector3::new(1e-9, 0.5, 1e4));
        let clamped = clamp_covariance(&cov, 1e-6, 1e2);
        let eig = SymmetricEigen::new(clamped).eigenvalues;
        assert!((eig.min() - 1e-6).abs() < 1e-12);
        assert!((eig.max() - 1e2).abs() < 1e-9);
    }

    #[test]
    fn gauss_newton_refine_weighs_prior() {
        let inst = crate::simulator::random_window_instance(11, 4, 5, 4, 8, false).unwrap();
        for lm in inst.landmarks.values() {
            let oracle = crate::oracles::gauss_newton_landmark(&lm.track, &inst.state, &inst.cameras, &lm.p_g).unwrap();
            let mut weak = lm.clone();
            weak.cov = Matrix3::identity() * 1e12;
            gauss_newton_refine(&mut weak, &inst.state, &inst.cameras, inst.u, 20).unwrap();
            assert!((weak.p_g - oracle).norm() < 1e-6, "{}", (weak.p_g - oracle).norm());

            let mut strong = lm.clone();
            strong.cov = Matrix3::identity() * 1e-16;
            gauss_newton_refine(&mut strong, &inst.state, &inst.cameras, inst.u, 20).unwrap();
            assert!((strong.p_g - lm.p_g).norm() < 1e-6);
            assert!(strong.cov.norm() <= 1e-15);
        }
    }
}

