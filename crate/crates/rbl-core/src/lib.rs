//! Gaussian belief propagation (GaBP) estimators for 6D rigid body
//! localization: sensor position/velocity estimation from range and Doppler
//! measurements, followed by direct estimation of the rotation angles,
//! translation, angular velocity and translational velocity of a rigid
//! sensor conformation.
//!
//! The crate is organized around the estimation chain:
//!
//! * [`geometry`] — rigid-body kinematics: rotation matrices, skew
//!   operators, their small-angle vectorized forms, and the forward
//!   transform/velocity maps.
//! * [`measurement`] — synthetic range/Doppler generation and construction
//!   of the effective linear systems consumed by the message-passing engine.
//! * [`gabp`] — the scalar-Gaussian message-passing engine with damping,
//!   optional truth-seeded initialization, and consensus readout.
//! * [`pipeline`] — the four estimation stages composed into stationary and
//!   moving end-to-end estimators.
//! * [`baseline`] — closed-form (weighted) least-squares and ridge solvers
//!   over the same linear systems, used both as comparison baselines and as
//!   oracles for the engine.
//! * [`harness`] — Monte-Carlo RMSE sweeps, convergence traces, runtime
//!   measurement, and CSV/manifest output backing the `rbl` CLI.

// Validation guards are written `!(x > 0.0)` on purpose: the negation also
// rejects NaN, which `x <= 0.0` silently lets through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod gabp;
pub mod geometry;
pub mod harness;
pub mod measurement;
pub mod pipeline;

pub use baseline::{ls_solve, ridge_solve, wls_solve, SolveReport};
pub use gabp::{
    bivariate_gabp, ic_refine, linear_gabp, linear_gabp_with_state, mfb_mode, GabpConfig,
    GabpResult, GabpState,
};
pub use geometry::{
    rotation_matrix_exact, rotation_matrix_small, skew, Conformation, MotionParams, PoseParams,
    RotationAngles, RotationModel,
};
pub use measurement::{simulate, LinearSystem, MeasurementSet, NoiseModel};
pub use pipeline::{
    run_moving, run_stationary, MovingEstimate, PipelineConfig, StationaryEstimate,
};
