//! Visual-inertial estimation backend built around a Schur-complement
//! error-state EKF.
//!
//! The measurement update projects the stacked reprojection model into its
//! gradient/Hessian form, marginalizes landmarks with a Schur complement,
//! updates the sliding-window pose state with a standard EKF step, and then
//! updates every landmark independently with its own 3x3 covariance.
//!
//! Conventions used throughout:
//! - quaternions follow the Hamilton convention; `q` maps body vectors into
//!   the global frame,
//! - rotation errors are global-frame (left) perturbations,
//!   `R = (I + [θ]x) R̂`,
//! - the IMU error state is ordered `(θ, p, v, b_a, b_g)` and each cloned
//!   pose contributes `(θ, p)`.

// Negated float comparisons are used on purpose so that NaN fails checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evalio;
pub mod filter;
pub mod geometry;
pub mod landmark_solver;
pub mod measurement;
pub mod oracles;
pub mod propagation;
pub mod schur_update;
pub mod simulator;
pub mod state;

pub use error::{Error, Result};
