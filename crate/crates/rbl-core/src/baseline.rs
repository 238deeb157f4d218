//! Closed-form comparison baselines and oracles: ordinary, weighted, and
//! prior-regularized (ridge) least squares over the same linear systems the
//! message-passing engine consumes.
//!
//! All three go through the normal equations with a symmetric
//! positive-definite factorization; the condition number of the normal
//! matrix is reported so benchmark runs can flag ill-conditioned geometries.

use crate::measurement::LinearSystem;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error(
        "normal equations are singular or numerically rank deficient (condition {condition:.3e})"
    )]
    Singular { condition: f64 },
    #[error("noise powers must be positive for weighted solves")]
    NonPositiveNoisePower,
    #[error("expected one prior per block ({blocks}), got {priors}")]
    PriorCount { blocks: usize, priors: usize },
    #[error("prior variances must be positive")]
    NonPositivePrior,
}

/// Gaussian prior on one unknown block: variance and mean per element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockPrior {
    pub variance: f64,
    pub mean: f64,
}

impl BlockPrior {
    pub fn new(variance: f64, mean: f64) -> Self {
        Self { variance, mean }
    }

    pub fn zero_mean(variance: f64) -> Self {
        Self::new(variance, 0.0)
    }
}

/// Solution report of a closed-form solve: the stacked estimate, the
/// unweighted residual norm, and the condition number of the normal matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub estimate: DVector<f64>,
    pub residual_norm: f64,
    pub condition: f64,
}

const RANK_TOLERANCE: f64 = 1e-12;

fn solve_normal_equations(
    normal: &DMatrix<f64>,
    rhs: &DVector<f64>,
    require_full_rank: bool,
) -> Result<(DVector<f64>, f64), BaselineError> {
    let eigen = normal.clone().symmetric_eigen();
    let max_eig = eigen.eigenvalues.max();
    let min_eig = eigen.eigenvalues.min();
    let condition = if min_eig > 0.0 {
        max_eig / min_eig
    } else {
        f64::INFINITY
    };
    if require_full_rank && !(min_eig > RANK_TOLERANCE * max_eig.max(1.0)) {
        return Err(BaselineError::Singular { condition });
    }
    let chol = normal
        .clone()
        .cholesky()
        .ok_or(BaselineError::Singular { condition })?;
    Ok((chol.solve(rhs), condition))
}

fn report(system: &LinearSystem, estimate: DVector<f64>, condition: f64) -> SolveReport {
    let residual_norm = (&system.observations - system.stacked_matrix() * &estimate).norm();
    SolveReport {
        estimate,
        residual_norm,
        condition,
    }
}

/// Ordinary least squares over all blocks jointly: min ‖y − Bx‖₂.
pub fn ls_solve(system: &LinearSystem) -> Result<SolveReport, BaselineError> {
    let b = system.stacked_matrix();
    let normal = b.transpose() * &b;
    let rhs = b.transpose() * &system.observations;
    let (estimate, condition) = solve_normal_equations(&normal, &rhs, true)?;
    Ok(report(system, estimate, condition))
}

/// Weighted least squares with weights 1/n0 per row:
/// min Σ_m (y_m − (Bx)_m)² / n0_m.
pub fn wls_solve(system: &LinearSystem) -> Result<SolveReport, BaselineError> {
    if system.noise_power.iter().any(|&p| !(p > 0.0)) {
        return Err(BaselineError::NonPositiveNoisePower);
    }
    let b = system.stacked_matrix();
    let mut weighted = b.clone();
    let mut rhs_vec = system.observations.clone();
    for m in 0..system.rows() {
        let w = 1.0 / system.noise_power[m];
        weighted.row_mut(m).scale_mut(w);
        rhs_vec[m] *= w;
    }
    let normal = b.transpose() * &weighted;
    let rhs = b.transpose() * &rhs_vec;
    let (estimate, condition) = solve_normal_equations(&normal, &rhs, true)?;
    Ok(report(system, estimate, condition))
}

/// Prior-regularized weighted least squares with per-block Gaussian priors:
/// min Σ_m (y_m − (Bx)_m)² / n0_m + Σ_k (x_k − μ_k)² / φ_k.
///
/// Always well posed for positive priors; the closed-form fixed point of the
/// Gaussian denoiser used by the message-passing engine.
pub fn ridge_solve(
    system: &LinearSystem,
    priors: &[BlockPrior],
) -> Result<SolveReport, BaselineError> {
    if priors.len() != system.blocks.len() {
        return Err(BaselineError::PriorCount {
            blocks: system.blocks.len(),
            priors: priors.len(),
        });
    }
    if priors.iter().any(|p| !(p.variance > 0.0)) {
        return Err(BaselineError::NonPositivePrior);
    }
    if system.noise_power.iter().any(|&p| !(p > 0.0)) {
        return Err(BaselineError::NonPositiveNoisePower);
    }
    let b = system.stacked_matrix();
    let k = system.num_unknowns();
    let mut weighted = b.clone();
    let mut rhs_vec = system.observations.clone();
    for m in 0..system.rows() {
        let w = 1.0 / system.noise_power[m];
        weighted.row_mut(m).scale_mut(w);
        rhs_vec[m] *= w;
    }
    let mut normal = b.transpose() * &weighted;
    let mut rhs = b.transpose() * &rhs_vec;
    let mut col = 0;
    for (block, prior) in system.blocks.iter().zip(priors) {
        for _ in 0..block.matrix.ncols() {
            normal[(col, col)] += 1.0 / prior.variance;
            rhs[col] += prior.mean / prior.variance;
            col += 1;
        }
    }
    debug_assert_eq!(col, k);
    let (estimate, condition) = solve_normal_equations(&normal, &rhs, false)?;
    Ok(report(system, estimate, condition))
}
