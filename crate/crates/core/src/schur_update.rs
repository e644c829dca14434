//! Equivalent residual model, Schur marginalization of landmarks and the
//! EKF pose update.
//!
//! The stacked model `r = J_x X̃ + J_f p̃_f + n` is projected onto
//! `[J_x J_f]ᵀ`, giving the gradient/Hessian form
//!
//! ```text
//! [b1]   [C1  C2] [X̃  ]
//! [b2] = [C2ᵀ C3] [p̃_f] + n',   R' = C u²
//! ```
//!
//! Eliminating the landmarks with `L = [I, −C2 C3⁻¹; 0, I]` decouples the
//! pose system `b_s = S X̃ + n1`, `R1 = S u²` with `S = C1 − C2 C3⁻¹ C2ᵀ`,
//! from one 3x3 system per landmark (see [`crate::landmark_solver`]).

use nalgebra::{DMatrix, DVector, Matrix3, MatrixXx3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};
use crate::measurement::StackedResidualModel;
use crate::state::SlidingWindowState;

/// Default lower bound on the smallest eigenvalue of a landmark block `C3_i`.
pub const DEFAULT_C3_EPS: f64 = 1e-9;

/// Eigenvalues of `S` below this fraction of the largest one are treated as
/// zero when inverting the innovation on the range of `S`.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Gradient and Hessian blocks of the equivalent residual model.
#[derive(Debug, Clone, PartialEq)]
pub struct SchurSystem {
    pub landmark_ids: Vec<u64>,
    /// `J_xᵀ r`
    pub b1: DVector<f64>,
    /// `J_fᵀ r`, one 3-vector per landmark.
    pub b2: Vec<Vector3<f64>>,
    /// `J_xᵀ J_x`
    pub c1: DMatrix<f64>,
    /// Column blocks of `J_xᵀ J_f`, one per landmark.
    pub c2: Vec<MatrixXx3<f64>>,
    /// Diagonal blocks of `J_fᵀ J_f`. The off-diagonal blocks are zero.
    pub c3: Vec<Matrix3<f64>>,
    pub u: f64,
}

impl SchurSystem {
    pub fn state_dim(&self) -> usize {
        self.b1.len()
    }

    pub fn num_landmarks(&self) -> usize {
        self.landmark_ids.len()
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.landmark_ids.iter().position(|&l| l == id)
    }

    pub fn b2_dense(&self) -> DVector<f64> {
        let mut b = DVector::zeros(3 * self.num_landmarks());
        for (i, v) in self.b2.iter().enumerate() {
            b.fixed_rows_mut::<3>(3 * i).copy_from(v);
        }
        b
    }

    pub fn c2_dense(&self) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(self.state_dim(), 3 * self.num_landmarks());
        for (i, block) in self.c2.iter().enumerate() {
            c.columns_mut(3 * i, 3).copy_from(block);
        }
        c
    }

    pub fn c3_dense(&self) -> DMatrix<f64> {
        let l = self.num_landmarks();
        let mut c = DMatrix::zeros(3 * l, 3 * l);
        for (i, block) in self.c3.iter().enumerate() {
            c.fixed_view_mut::<3, 3>(3 * i, 3 * i).copy_from(block);
        }
        c
    }
}

/// Pose-only equivalent residual model after landmark marginalization.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseResidualModel {
    /// `b1 − C2 C3⁻¹ b2`
    pub b_s: DVector<f64>,
    /// `C1 − C2 C3⁻¹ C2ᵀ`
    pub s: DMatrix<f64>,
    /// `S u²`
    pub r1: DMatrix<f64>,
    pub u: f64,
}

/// Accumulates `b = Jᵀr` and `C = JᵀJ` block by block; dense `J_f` is never
/// formed.
pub fn build_equivalent(model: &StackedResidualModel) -> Result<SchurSystem> {
    if model.is_empty() {
        return Err(Error::EmptyModel);
    }
    let n = model.state_dim;
    let mut b1 = DVector::zeros(n);
    let mut c1 = DMatrix::zeros(n, n);
    let mut b2 = Vec::with_capacity(model.blocks.len());
    let mut c2 = Vec::with_capacity(model.blocks.len());
    let mut c3 = Vec::with_capacity(model.blocks.len());
    for block in &model.blocks {
        let mut b2_i = Vector3::zeros();
        let mut c2_i = MatrixXx3::zeros(n);
        let mut c3_i = Matrix3::zeros();
        for row in &block.rows {
            let o = SlidingWindowState::clone_offset(row.clone_index);
            let ja_t = row.j_pose.transpose();
            let jf_t = row.j_landmark.transpose();
            let mut b1_o = b1.fixed_rows_mut::<6>(o);
            b1_o += ja_t * row.r;
            let mut c1_oo = c1.fixed_view_mut::<6, 6>(o, o);
            c1_oo += ja_t * row.j_pose;
            let mut c2_o = c2_i.fixed_rows_mut::<6>(o);
            c2_o += ja_t * row.j_landmark;
            b2_i += jf_t * row.r;
            c3_i += jf_t * row.j_landmark;
        }
        b2.push(b2_i);
        c2.push(c2_i);
        c3.push((c3_i + c3_i.transpose()) * 0.5);
    }
    Ok(SchurSystem {
        landmark_ids: model.landmark_ids(),
        b1,
        b2,
        c1: (&c1 + c1.transpose()) * 0.5,
        c2,
        c3,
        u: model.u,
    })
}

/// Closed-form inverse of a symmetric 3x3 block, refusing blocks whose
/// smallest eigenvalue is at or below `eps`.
pub fn invert_landmark_block(c3: &Matrix3<f64>, eps: f64) -> Option<Matrix3<f64>> {
    let min_eig = SymmetricEigen::new(*c3).eigenvalues.min();
    if !(min_eig > eps) {
        return None;
    }
    let (a, b, c) = (c3[(0, 0)], c3[(0, 1)], c3[(0, 2)]);
    let (d, e) = (c3[(1, 1)], c3[(1, 2)]);
    let f = c3[(2, 2)];
    let m00 = d * f - e * e;
    let m01 = c * e - b * f;
    let m02 = b * e - c * d;
    let det = a * m00 + b * m01 + c * m02;
    let m11 = a * f - c * c;
    let m12 = b * c - a * e;
    let m22 = a * d - b * b;
    Some(Matrix3::new(m00, m01, m02, m01, m11, m12, m02, m12, m22) / det)
}

/// Eliminates every landmark with a rank-3 downdate of `C1` and `b1`.
pub fn schur_marginalize(sys: &SchurSystem, c3_eps: f64) -> Result<PoseResidualModel> {
    let mut s = sys.c1.clone();
    let mut b_s = sys.b1.clone();
    for (i, id) in sys.landmark_ids.iter().enumerate() {
        let c3_inv = invert_landmark_block(&sys.c3[i], c3_eps).ok_or(Error::SingularLandmarkBlock(*id))?;
        let c2 = &sys.c2[i];
        let k = c2 * c3_inv;
        s -= &k * c2.transpose();
        b_s -= &k * sys.b2[i];
    }
    crate::state::symmetrize(&mut s);
    let r1 = &s * (sys.u * sys.u);
    Ok(PoseResidualModel { b_s, s, r1, u: sys.u })
}

/// Builds and marginalizes the system, removing landmarks whose Hessian block
/// is singular from the stacked model and retrying. Returns the ids removed.
pub fn marginalize_with_retry(
    model: &mut StackedResidualModel,
    c3_eps: f64,
) -> Result<(SchurSystem, PoseResidualModel, Vec<u64>)> {
    let mut removed = Vec::new();
    loop {
        let sys = build_equivalent(model)?;
        match schur_marginalize(&sys, c3_eps) {
            Ok(prm) => return Ok((sys, prm, removed)),
            Err(Error::SingularLandmarkBlock(id)) => {
                model.remove_landmark(id);
                removed.push(id);
            }
            Err(e) => return Err(e),
        }
    }
}

/// Kalman update with measurement `b_s = S X̃ + n1`, `n1 ~ N(0, S u²)`:
/// `K = P S (S P S + S u²)⁺`, `Δx = K b_s`, Joseph covariance update.
///
/// `S` is singular whenever some states are unobserved (the current IMU
/// block always is), so the innovation is inverted on the range of `S`:
/// with `S = U Λ Uᵀ` restricted to its nonzero spectrum,
/// `K = P U Λ^½ (Λ^½ Uᵀ P U Λ^½ + u² I)⁻¹ Λ^-½ Uᵀ`.
pub fn equivalent_kalman_update(
    cov: &DMatrix<f64>,
    prm: &PoseResidualModel,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = cov.nrows();
    if prm.s.nrows() != n || prm.b_s.len() != n {
        return Err(Error::DimensionMismatch { expected: n, actual: prm.s.nrows() });
    }
    if !prm.s.iter().all(|v| v.is_finite()) {
        return Err(Error::InnovationNotInvertible);
    }
    let eig = SymmetricEigen::new(prm.s.clone());
    let lambda_max = eig.eigenvalues.amax();
    let kept: Vec<usize> = (0..n)
        .filter(|&i| eig.eigenvalues[i] > RANK_TOLERANCE * lambda_max)
        .collect();
    if kept.is_empty() {
        return Ok((DVector::zeros(n), cov.clone()));
    }
    let k = kept.len();
    // H = Λ^½ Uᵀ, whitened measurement y = Λ^-½ Uᵀ b_s
    let mut h = DMatrix::zeros(k, n);
    let mut y = DVector::zeros(k);
    for (row, &i) in kept.iter().enumerate() {
        let lam = eig.eigenvalues[i];
        let u_i = eig.eigenvectors.column(i);
        h.row_mut(row).copy_from(&(u_i.transpose() * lam.sqrt()));
        y[row] = u_i.dot(&prm.b_s) / lam.sqrt();
    }
    let u2 = prm.u * prm.u;
    let ph_t = cov * h.transpose();
    let innovation = &h * &ph_t + DMatrix::identity(k, k) * u2;
    let chol = innovation.cholesky().ok_or(Error::InnovationNotInvertible)?;
    // K = P Hᵀ M⁻¹ Λ^-½ Uᵀ
    let gain_white = chol.solve(&ph_t.transpose()).transpose();
    let mut back = DMatrix::zeros(k, n);
    for (row, &i) in kept.iter().enumerate() {
        let lam = eig.eigenvalues[i];
        back.row_mut(row).copy_from(&(eig.eigenvectors.column(i).transpose() / lam.sqrt()));
    }
    let gain = &gain_white * back;
    let dx = &gain_white * y;

    let i_ks = DMatrix::identity(n, n) - &gain * &prm.s;
    let mut post = &i_ks * cov * i_ks.transpose() + &gain * &prm.r1 * gain.transpose();
    crate::state::symmetrize(&mut post);
    if !dx.iter().chain(post.iter()).all(|v| v.is_finite()) {
        return Err(Error::InnovationNotInvertible);
    }
    Ok((dx, post))
}

/// Applies the pose update to the window state and returns `Δx`.
pub fn ekf_update_pose(state: &mut SlidingWindowState, prm: &PoseResidualModel) -> Result<DVector<f64>> {
    let (dx, post) = equivalent_kalman_update(&state.cov, prm)?;
    state.apply_correction(&dx)?;
    state.set_cov(post)?;
    Ok(dx)
}
