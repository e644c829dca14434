//! Brute-force reference implementations used by tests and the acceptance
//! suite. Nothing here is called from the filter path, and nothing here
//! reuses filter code beyond the geometry primitives.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{project, projection_jacobian, PinholeCamera};
use crate::measurement::StackedResidualModel;
use crate::state::{SlidingWindowState, TrackEntry};

/// Eigenvalue ratio below which a dense Gram matrix counts as singular.
const SINGULAR_RATIO: f64 = 1e-12;

/// Dense `J_x` and `J_f` of the stacked model, assembled row by row.
fn dense_jacobians(model: &StackedResidualModel) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let m = model.num_rows();
    let n = model.state_dim;
    let l = model.num_landmarks();
    let mut jx = DMatrix::zeros(m, n);
    let mut jf = DMatrix::zeros(m, 3 * l);
    let mut r = DVector::zeros(m);
    let mut row = 0;
    for (li, block) in model.blocks.iter().enumerate() {
        for obs in &block.rows {
            let col = 15 + 6 * obs.clone_index;
            for a in 0..2 {
                for b in 0..6 {
                    jx[(row + a, col + b)] = obs.j_pose[(a, b)];
                }
                for b in 0..3 {
                    jf[(row + a, 3 * li + b)] = obs.j_landmark[(a, b)];
                }
                r[row + a] = obs.r[a];
            }
            row += 2;
        }
    }
    (jx, jf, r)
}

/// Textbook EKF update with white noise `u² I`, Joseph covariance form.
fn textbook_update(
    cov: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DVector<f64>,
    u: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = cov.nrows();
    let m = h.nrows();
    if m == 0 {
        return Ok((DVector::zeros(n), cov.clone()));
    }
    let pht = cov * h.transpose();
    let innovation = h * &pht + DMatrix::identity(m, m) * (u * u);
    let chol = innovation.cholesky().ok_or(Error::SingularSystem)?;
    let gain = chol.solve(&pht.transpose()).transpose();
    let dx = &gain * r;
    let i_kh = DMatrix::identity(n, n) - &gain * h;
    let post = &i_kh * cov * i_kh.transpose() + &gain * gain.transpose() * (u * u);
    let post = (&post + post.transpose()) * 0.5;
    Ok((dx, post))
}

/// Marginalizes every landmark from the dense normal equations and performs a
/// standard EKF update on the result.
///
/// With `Π = I − J_f (J_fᵀJ_f)⁻¹ J_fᵀ` the marginal information is
/// `J_xᵀ Π J_x / u²` and the marginal gradient `J_xᵀ Π r / u²`. Since `Π` is
/// an orthogonal projector, the measurement `Π r = Π J_x X̃ + Π n` with noise
/// `u² I` carries exactly that information.
pub fn direct_marginalized_update(
    model: &StackedResidualModel,
    cov: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if cov.nrows() != model.state_dim {
        return Err(Error::DimensionMismatch { expected: model.state_dim, actual: cov.nrows() });
    }
    let (jx, jf, r) = dense_jacobians(model);
    let m = r.len();
    let gram = jf.transpose() * &jf;
    let eig = SymmetricEigen::new(gram.clone());
    let max = eig.eigenvalues.amax();
    if gram.nrows() == 0 || max <= 0.0 || eig.eigenvalues.min() <= SINGULAR_RATIO * max {
        return Err(Error::SingularSystem);
    }
    let gram_inv = gram.try_inverse().ok_or(Error::SingularSystem)?;
    let proj = DMatrix::identity(m, m) - &jf * gram_inv * jf.transpose();
    let h = &proj * jx;
    let rm = &proj * r;
    textbook_update(cov, &h, &rm, model.u)
}

/// Projects each landmark's rows onto the left nullspace of its `J_f` block,
/// obtained from a full QR factorization, and performs a standard EKF update
/// on the stacked projected rows.
pub fn nullspace_update(
    model: &StackedResidualModel,
    cov: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = model.state_dim;
    if cov.nrows() != n {
        return Err(Error::DimensionMismatch { expected: n, actual: cov.nrows() });
    }
    let mut h_rows: Vec<DMatrix<f64>> = Vec::new();
    let mut r_rows: Vec<DVector<f64>> = Vec::new();
    for block in &model.blocks {
        let k = 2 * block.rows.len();
        if k <= 3 {
            return Err(Error::SingularSystem);
        }
        let mut jx = DMatrix::zeros(k, n);
        let mut jf = DMatrix::zeros(k, 3);
        let mut r = DVector::zeros(k);
        for (i, obs) in block.rows.iter().enumerate() {
            let col = 15 + 6 * obs.clone_index;
            for a in 0..2 {
                for b in 0..6 {
                    jx[(2 * i + a, col + b)] = obs.j_pose[(a, b)];
                }
                for b in 0..3 {
                    jf[(2 * i + a, b)] = obs.j_landmark[(a, b)];
                }
                r[2 * i + a] = obs.r[a];
            }
        }
        let qr = jf.clone().qr();
        let rdiag = qr.r().diagonal().abs();
        if rdiag.min() <= SINGULAR_RATIO.sqrt() * rdiag.max() {
            return Err(Error::SingularSystem);
        }
        let mut qt = DMatrix::identity(k, k);
        qr.q_tr_mul(&mut qt);
        let null_t = qt.rows(3, k - 3).into_owned();
        h_rows.push(&null_t * jx);
        r_rows.push(&null_t * r);
    }
    let total: usize = r_rows.iter().map(|r| r.len()).sum();
    let mut h = DMatrix::zeros(total, n);
    let mut r = DVector::zeros(total);
    let mut at = 0;
    for (hb, rb) in h_rows.iter().zip(&r_rows) {
        h.rows_mut(at, hb.nrows()).copy_from(hb);
        r.rows_mut(at, rb.len()).copy_from(rb);
        at += rb.len();
    }
    textbook_update(cov, &h, &r, model.u)
}

/// Gauss-Newton triangulation with the window poses held fixed. Stops when
/// the step drops below 1e-10 m or after 20 iterations.
pub fn gauss_newton_landmark(
    track: &[TrackEntry],
    state: &SlidingWindowState,
    cams: &[PinholeCamera],
    p0: &Vector3<f64>,
) -> Result<Vector3<f64>> {
    let mut p = *p0;
    for _ in 0..20 {
        let mut h = Matrix3::zeros();
        let mut g = Vector3::zeros();
        let mut used = 0;
        for e in track {
            let (Some(clone), Some(cam)) = (state.clones.iter().find(|c| c.id == e.clone_id), cams.get(e.camera))
            else {
                continue;
            };
            let r_gi = clone.q.to_rotation_matrix().into_inner();
            let p_i = r_gi.transpose() * (p - clone.p);
            let p_c = cam.r_ic.transpose() * (p_i - cam.p_ic);
            let j = projection_jacobian(&p_c)? * cam.r_ic.transpose() * r_gi.transpose();
            let r = e.z - project(&p_c)?;
            h += j.transpose() * j;
            g += j.transpose() * r;
            used += 1;
        }
        if used < 2 {
            return Err(Error::InsufficientTrack(used as u64));
        }
        let eig = SymmetricEigen::new(h).eigenvalues;
        let cond = eig.max() / eig.min().max(f64::MIN_POSITIVE);
        if !(cond.is_finite() && cond < 1e8) {
            return Err(Error::IllConditioned(cond));
        }
        let step = h.try_inverse().ok_or(Error::IllConditioned(cond))? * g;
        p += step;
        if step.norm() < 1e-10 {
            break;
        }
    }
    Ok(p)
}

/// Central-difference Jacobian with per-component step `eps·max(1, |x0ᵢ|)`.
pub fn numeric_jacobian(f: &dyn Fn(&DVector<f64>) -> DVector<f64>, x0: &DVector<f64>, eps: f64) -> DMatrix<f64> {
    let m = f(x0).len();
    let mut jac = DMatrix::zeros(m, x0.len());
    for i in 0..x0.len() {
        let h = eps * x0[i].abs().max(1.0);
        let mut xp = x0.clone();
        let mut xm = x0.clone();
        xp[i] += h;
        xm[i] -= h;
        jac.set_column(i, &((f(&xp) - f(&xm)) / (2.0 * h)));
    }
    jac
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
pub fn matrix_exp(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.abs().row_sum().max();
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let scaled = a / 2f64.powi(squarings);
    let mut result = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..=24 {
        term = &term * &scaled / k as f64;
        result += &term;
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// Relative deviations of the Schur update path from the two oracles.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PathComparison {
    pub dx_dense: f64,
    pub cov_dense: f64,
    pub dx_nullspace: f64,
    pub cov_nullspace: f64,
    /// Landmarks dropped for singular Hessian blocks before comparison.
    pub dropped: usize,
    pub landmarks: usize,
}

impl PathComparison {
    pub fn max(&self) -> f64 {
        self.dx_dense.max(self.cov_dense).max(self.dx_nullspace).max(self.cov_nullspace)
    }
}

fn relative(a: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    let diff = (a - reference).norm();
    if diff == 0.0 {
        0.0
    } else {
        diff / reference.norm().max(f64::MIN_POSITIVE)
    }
}

/// Runs the Schur update path on `model` (dropping singular landmarks as
/// the filter does) and both oracles on the resulting model, and reports
/// their relative deviations.
pub fn compare_update_paths(model: &StackedResidualModel, cov: &DMatrix<f64>, c3_eps: f64) -> Result<PathComparison> {
    let mut model = model.clone();
    let (_, prm, dropped) = crate::schur_update::marginalize_with_retry(&mut model, c3_eps)?;
    let (dx, post) = crate::schur_update::equivalent_kalman_update(cov, &prm)?;
    let (dx_d, post_d) = direct_marginalized_update(&model, cov)?;
    let (dx_n, post_n) = nullspace_update(&model, cov)?;
    let col = |v: &DVector<f64>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    Ok(PathComparison {
        dx_dense: relative(&col(&dx), &col(&dx_d)),
        cov_dense: relative(&post, &post_d),
        dx_nullspace: relative(&col(&dx), &col(&dx_n)),
        cov_nullspace: relative(&post, &post_n),
        dropped: dropped.len(),
        landmarks: model.num_landmarks(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Quat;
    use crate::measurement::{LandmarkBlock, Matrix2x6, ObservationJacobians};
    use crate::state::ImuState;
    use nalgebra::{Matrix2x3, Vector2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(rng: &mut ChaCha8Rng, clones: usize, landmarks: usize, obs: usize) -> StackedResidualModel {
        let blocks = (0..landmarks)
            .map(|l| LandmarkBlock {
                landmark_id: l as u64,
                rows: (0..obs)
                    .map(|k| ObservationJacobians {
                        clone_index: k % clones,
                        r: Vector2::from_fn(|_, _| rng.random_range(-1e-2..1e-2)),
                        j_pose: Matrix2x6::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                        j_landmark: Matrix2x3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                    })
                    .collect(),
            })
            .collect();
        StackedResidualModel { state_dim: 15 + 6 * clones, blocks, u: 0.05 }
    }

    fn random_cov(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        (&a * a.transpose()) * 1e-3 + DMatrix::identity(n, n) * 1e-4
    }

    fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn dense_and_nullspace_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let model = random_model(&mut rng, 3, 4, 4);
            let cov = random_cov(&mut rng, model.state_dim);
            let (dx_a, p_a) = direct_marginalized_update(&model, &cov).unwrap();
            let (dx_b, p_b) = nullspace_update(&model, &cov).unwrap();
            assert!((&dx_a - &dx_b).norm() <= 1e-8 * dx_b.norm(), "dx");
            assert!(rel(&p_a, &p_b) < 1e-8, "P");
        }
    }

    #[test]
    fn zero_residual_gives_zero_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model = random_model(&mut rng, 2, 3, 3);
        for b in &mut model.blocks {
            for row in &mut b.rows {
                row.r = Vector2::zeros();
            }
        }
        let cov = random_cov(&mut rng, model.state_dim);
        assert_eq!(direct_marginalized_update(&model, &cov).unwrap().0.norm(), 0.0);
        assert_eq!(nullspace_update(&model, &cov).unwrap().0.norm(), 0.0);
    }

    #[test]
    fn single_observation_is_singular() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = random_model(&mut rng, 2, 1, 1);
        let cov = random_cov(&mut rng, model.state_dim);
        assert_eq!(direct_marginalized_update(&model, &cov), Err(Error::SingularSystem));
        assert_eq!(nullspace_update(&model, &cov), Err(Error::SingularSystem));
    }

    #[test]
    fn numeric_jacobian_identity_and_quadratic() {
        let x0 = DVector::from_vec(vec![0.3, -2.0, 5.0]);
        let id = numeric_jacobian(&|x: &DVector<f64>| x.clone(), &x0, 1e-6);
        assert!((id - DMatrix::identity(3, 3)).abs().max() < 1e-9);

        let quad = |x: &DVector<f64>| DVector::from_vec(vec![x[0] * x[0] + 3.0 * x[1] * x[2], x[2] * x[2] - x[0]]);
        let j = numeric_jacobian(&quad, &x0, 1e-3);
        let exact = DMatrix::from_row_slice(2, 3, &[0.6, 15.0, -6.0, -1.0, 0.0, 10.0]);
        assert!((j - exact).abs().max() < 1e-12);
    }

    #[test]
    fn numeric_jacobian_of_projection() {
        let p = DVector::from_vec(vec![0.4, -0.3, 2.5]);
        let f = |x: &DVector<f64>| {
            let z = project(&Vector3::new(x[0], x[1], x[2])).unwrap();
            DVector::from_vec(vec![z.x, z.y])
        };
        let j = numeric_jacobian(&f, &p, 1e-6);
        let exact = projection_jacobian(&Vector3::new(0.4, -0.3, 2.5)).unwrap();
        let exact = DMatrix::from_column_slice(2, 3, exact.as_slice());
        assert!(rel(&j, &exact) < 1e-6);
    }

    #[test]
    fn matrix_exp_of_rotation_generator() {
        let theta = 2.5;
        let a = DMatrix::from_row_slice(3, 3, &[0.0, -theta, 0.0, theta, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let e = matrix_exp(&a);
        let r = Quat::from_scaled_axis(Vector3::z() * theta).to_rotation_matrix().into_inner();
        assert!((e - DMatrix::from_column_slice(3, 3, r.as_slice())).abs().max() < 1e-13);
        assert_eq!(matrix_exp(&DMatrix::zeros(4, 4)), DMatrix::identity(4, 4));
    }

    fn gn_fixture() -> (SlidingWindowState, Vec<PinholeCamera>, Vector3<f64>, Vec<TrackEntry>) {
        let mut s = SlidingWindowState::new(ImuState::at_rest(0.0), DMatrix::identity(15, 15)).unwrap();
        for i in 0..4 {
            s.imu.p = Vector3::new(0.0, 0.4 * i as f64, 0.1 * i as f64);
            s.imu.q = Quat::from_euler_angles(0.0, 0.02 * i as f64, -0.03 * i as f64);
            s.augment();
        }
        let cams = vec![PinholeCamera::forward_looking(450.0, 450.0, 752, 480)];
        let truth = Vector3::new(6.0, 0.7, -0.4);
        let track = s
            .clones
            .iter()
            .map(|c| TrackEntry {
                clone_id: c.id,
                camera: 0,
                z: project(&cams[0].world_to_camera(&c.q, &c.p, &truth)).unwrap(),
            })
            .collect();
        (s, cams, truth, track)
    }

    #[test]
    fn gauss_newton_recovers_noise_free_point() {
        let (s, cams, truth, track) = gn_fixture();
        let p = gauss_newton_landmark(&track, &s, &cams, &(truth + Vector3::new(0.5, -0.2, 0.1))).unwrap();
        assert!((p - truth).norm() < 1e-9);
        let same = gauss_newton_landmark(&track, &s, &cams, &truth).unwrap();
        assert!((same - truth).norm() < 1e-12);
    }

    #[test]
    fn gauss_newton_rejects_single_ray() {
        let (s, cams, truth, track) = gn_fixture();
        assert!(gauss_newton_landmark(&track[..1], &s, &cams, &truth).is_err());
    }

    #[test]
    fn update_paths_agree_on_random_windows() {
        for seed in 0..8 {
            let inst = crate::simulator::random_window_instance(seed, 2 + seed as usize % 4, 12, 2, 6, seed % 2 == 0).unwrap();
            let model = crate::measurement::stack(&inst.state, inst.landmarks.values(), &inst.cameras, inst.u).model;
            let cmp = compare_update_paths(&model, &inst.state.cov, crate::schur_update::DEFAULT_C3_EPS).unwrap();
            assert!(cmp.max() < 1e-8, "seed {seed}: {cmp:?}");
        }
    }
}
