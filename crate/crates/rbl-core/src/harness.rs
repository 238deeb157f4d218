//! Monte-Carlo benchmark harness: RMSE sweeps over noise levels, matched
//! filter bounds, convergence traces, runtime measurement, and CSV/manifest
//! output. This is the library side of the `rbl` command line tool.
//!
//! Determinism contract: every trial derives its own RNG streams from the
//! master seed and the trial index, and aggregation is a sequential fold
//! over the trial-ordered results, so neither the worker count nor the
//! estimator selection changes any number in the output.

use crate::baseline::{ls_solve, wls_solve, BaselineError, SolveReport};
use crate::geometry::{
    rotation_matrix_small, sensor_velocity, transform_sensor, Conformation, GeometryError,
    MotionParams, PoseParams, RotationAngles,
};
use crate::measurement::{
    build_motion_system, build_pose_system, build_position_system, build_velocity_system, simulate,
    LinearSystem, MeasurementSet, NoiseModel,
};
use crate::pipeline::{
    run_moving, run_stationary, MovingEstimate, PipelineConfig, StageTimings, StationaryEstimate,
};
use nalgebra::{DMatrix, DVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("estimate and truth lists differ in length ({estimates} vs {truths})")]
    LengthMismatch { estimates: usize, truths: usize },
    #[error("invalid experiment config: {0}")]
    InvalidConfig(&'static str),
    #[error("conformation file: {0}")]
    ConformationFormat(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Measurement(#[from] crate::measurement::MeasurementError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Pipeline(#[from] crate::pipeline::PipelineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which scenario a sweep runs: range-only or range plus Doppler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Stationary,
    Moving,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scenario::Stationary => write!(f, "stationary"),
            Scenario::Moving => write!(f, "moving"),
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stationary" => Ok(Scenario::Stationary),
            "moving" => Ok(Scenario::Moving),
            other => Err(format!("unknown scenario '{other}' (stationary|moving)")),
        }
    }
}

/// Estimators a sweep can run on the shared measurement sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    /// The message-passing pipeline.
    Gabp,
    /// Unweighted least squares on the identical linear systems.
    Ls,
    /// Least squares weighted by the inverse composite-noise powers.
    Wls,
    /// The message-passing pipeline with all soft replicas seeded at the
    /// true values (matched filter bound).
    Mfb,
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Estimator::Gabp => write!(f, "gabp"),
            Estimator::Ls => write!(f, "ls"),
            Estimator::Wls => write!(f, "wls"),
            Estimator::Mfb => write!(f, "mfb"),
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gabp" => Ok(Estimator::Gabp),
            "ls" => Ok(Estimator::Ls),
            "wls" => Ok(Estimator::Wls),
            "mfb" => Ok(Estimator::Mfb),
            other => Err(format!("unknown estimator '{other}' (gabp|ls|wls|mfb)")),
        }
    }
}

/// Parameter families reported by the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Position,
    Translation,
    Rotation,
    Velocity,
    TranslationalVelocity,
    AngularVelocity,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Position,
        Family::Translation,
        Family::Rotation,
        Family::Velocity,
        Family::TranslationalVelocity,
        Family::AngularVelocity,
    ];

    fn index(self) -> usize {
        Family::ALL.iter().position(|&f| f == self).unwrap()
    }

    pub fn unit(self) -> &'static str {
        match self {
            Family::Position | Family::Translation => "m",
            Family::Rotation => "rad",
            Family::Velocity | Family::TranslationalVelocity => "m/s",
            Family::AngularVelocity => "rad/s",
        }
    }

    fn in_scenario(self, scenario: Scenario) -> bool {
        match scenario {
            Scenario::Stationary => matches!(
                self,
                Family::Position | Family::Translation | Family::Rotation
            ),
            Scenario::Moving => true,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::Position => write!(f, "position"),
            Family::Translation => write!(f, "translation"),
            Family::Rotation => write!(f, "rotation"),
            Family::Velocity => write!(f, "velocity"),
            Family::TranslationalVelocity => write!(f, "translational-velocity"),
            Family::AngularVelocity => write!(f, "angular-velocity"),
        }
    }
}

/// The four iterative algorithms, for convergence and runtime reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    PositionGabp,
    PoseGabp,
    VelocityGabp,
    MotionGabp,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::PositionGabp,
        Algorithm::PoseGabp,
        Algorithm::VelocityGabp,
        Algorithm::MotionGabp,
    ];
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Algorithm::PositionGabp => write!(f, "position-gabp"),
            Algorithm::PoseGabp => write!(f, "pose-gabp"),
            Algorithm::VelocityGabp => write!(f, "velocity-gabp"),
            Algorithm::MotionGabp => write!(f, "motion-gabp"),
        }
    }
}

/// Full sweep configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    /// Noise grid: range error standard deviations in meters.
    pub sigma_grid: Vec<f64>,
    /// Monte-Carlo trials per noise level.
    pub trials: usize,
    pub seed: u64,
    pub estimators: Vec<Estimator>,
    /// Doppler noise coupling: sigma_doppler = factor * sigma_range.
    pub doppler_factor: f64,
    pub pipeline: PipelineConfig,
    pub conformation: Conformation,
    /// Write measured wall times into the CSV; disable for byte-identical
    /// outputs across repeated runs.
    pub include_timing: bool,
}

impl ExperimentConfig {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            scenario,
            sigma_grid: vec![1e-3, 1e-2, 1e-1, 1.0],
            trials: 200,
            seed: 1,
            estimators: vec![Estimator::Gabp, Estimator::Ls],
            doppler_factor: 10.0,
            pipeline: PipelineConfig::default(),
            conformation: default_conformation(),
            include_timing: true,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.sigma_grid.is_empty() {
            return Err(HarnessError::InvalidConfig("noise grid must be nonempty"));
        }
        if self.sigma_grid.iter().any(|&s| !(s >= 0.0)) {
            return Err(HarnessError::InvalidConfig("noise levels must be >= 0"));
        }
        if self.trials == 0 {
            return Err(HarnessError::InvalidConfig("need at least one trial"));
        }
        if self.estimators.is_empty() {
            return Err(HarnessError::InvalidConfig("need at least one estimator"));
        }
        if !(self.doppler_factor >= 0.0) {
            return Err(HarnessError::InvalidConfig("doppler factor must be >= 0"));
        }
        Ok(())
    }
}

/// One aggregated sweep result row.
#[derive(Debug, Clone, PartialEq)]
pub struct RmseRecord {
    pub sigma: f64,
    pub estimator: Estimator,
    pub family: Family,
    /// NaN when every trial of this estimator diverged.
    pub rmse: f64,
    pub unit: &'static str,
    /// Trials that entered the aggregate (diverged trials excluded).
    pub trials: usize,
    pub mean_iterations: f64,
    pub mean_ms: f64,
    pub diverged: usize,
}

/// Root mean squared Euclidean error over trials; the truth may differ per
/// trial.
pub fn rmse(estimates: &[DVector<f64>], truths: &[DVector<f64>]) -> Result<f64, HarnessError> {
    if estimates.len() != truths.len() || estimates.is_empty() {
        return Err(HarnessError::LengthMismatch {
            estimates: estimates.len(),
            truths: truths.len(),
        });
    }
    let mut sum_sq = 0.0;
    for (estimate, truth) in estimates.iter().zip(truths) {
        if estimate.len() != truth.len() {
            return Err(HarnessError::LengthMismatch {
                estimates: estimate.len(),
                truths: truth.len(),
            });
        }
        sum_sq += (estimate - truth).norm_squared();
    }
    Ok((sum_sq / estimates.len() as f64).sqrt())
}

/// The evaluation setup's rigid body and anchor layout: eight sensors at the
/// vertices of a unit cube around the origin, eight anchors at the vertices
/// of a cube of half-width 10 m.
pub fn default_conformation() -> Conformation {
    let body = DMatrix::from_row_slice(
        3,
        8,
        &[
            -0.5, 0.5, 0.5, -0.5, -0.5, 0.5, -0.5, 0.5, //
            -0.5, -0.5, 0.5, 0.5, -0.5, -0.5, 0.5, 0.5, //
            -0.5, -0.5, -0.5, -0.5, 0.5, 0.5, 0.5, 0.5,
        ],
    );
    let anchors = body.clone() * 20.0;
    Conformation::new(body, anchors).expect("the cube layout is valid")
}

/// Cube body with anchors on two nested cubes (16 anchors), for the runtime
/// scaling measurement.
pub fn doubled_anchor_conformation() -> Conformation {
    let base = default_conformation();
    let outer = base.anchors().clone();
    let inner = base.anchors().clone() * 0.6;
    let mut anchors = DMatrix::zeros(3, 16);
    anchors.view_mut((0, 0), (3, 8)).copy_from(&outer);
    anchors.view_mut((0, 8), (3, 8)).copy_from(&inner);
    Conformation::new(base.body().clone(), anchors).expect("nested cubes are valid")
}

/// Parse a conformation from the plain-text interchange format: a first line
/// `M N`, then M anchor rows, then N sensor rows, three whitespace-separated
/// reals each (meters).
pub fn parse_conformation(text: &str) -> Result<Conformation, HarnessError> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header = lines
        .next()
        .ok_or_else(|| HarnessError::ConformationFormat("empty file".into()))?;
    let mut parts = header.split_whitespace();
    let m: usize = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| HarnessError::ConformationFormat("bad anchor count".into()))?;
    let n: usize = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| HarnessError::ConformationFormat("bad sensor count".into()))?;
    if parts.next().is_some() {
        return Err(HarnessError::ConformationFormat(
            "header must be exactly 'M N'".into(),
        ));
    }
    let mut read_rows = |count: usize, what: &str| -> Result<DMatrix<f64>, HarnessError> {
        let mut out = DMatrix::zeros(3, count);
        for col in 0..count {
            let line = lines.next().ok_or_else(|| {
                HarnessError::ConformationFormat(format!("missing {what} row {}", col + 1))
            })?;
            let values: Vec<f64> = line
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| {
                    HarnessError::ConformationFormat(format!("{what} row {}: {e}", col + 1))
                })?;
            if values.len() != 3 {
                return Err(HarnessError::ConformationFormat(format!(
                    "{what} row {} must have 3 coordinates",
                    col + 1
                )));
            }
            out.column_mut(col).copy_from_slice(&values);
        }
        Ok(out)
    };
    let anchors = read_rows(m, "anchor")?;
    let body = read_rows(n, "sensor")?;
    if lines.next().is_some() {
        return Err(HarnessError::ConformationFormat(
            "trailing data after the sensor rows".into(),
        ));
    }
    Ok(Conformation::new(body, anchors)?)
}

pub fn read_conformation(path: &Path) -> Result<Conformation, HarnessError> {
    parse_conformation(&std::fs::read_to_string(path)?)
}

/// Render a conformation in the interchange format accepted by
/// [`parse_conformation`].
pub fn format_conformation(conformation: &Conformation) -> String {
    let mut out = format!(
        "{} {}\n",
        conformation.num_anchors(),
        conformation.num_sensors()
    );
    for m in 0..conformation.num_anchors() {
        let a = conformation.anchor(m);
        out.push_str(&format!("{} {} {}\n", a.x, a.y, a.z));
    }
    for n in 0..conformation.num_sensors() {
        let c = conformation.sensor(n);
        out.push_str(&format!("{} {} {}\n", c.x, c.y, c.z));
    }
    out
}

const PARAM_STREAM: u64 = 0x706172616d; // "param"
const NOISE_STREAM: u64 = 0x6e6f697365; // "noise"

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn derive_seed(master: u64, trial: u64, stream: u64) -> u64 {
    splitmix64(master ^ splitmix64(trial ^ splitmix64(stream)))
}

/// Ground truth of one trial, drawn from the configured zero-mean priors.
fn draw_truth(cfg: &ExperimentConfig, trial: u64) -> (PoseParams, Option<MotionParams>) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, trial, PARAM_STREAM));
    let mut gauss = |std: f64| -> f64 {
        let draw: f64 = StandardNormal.sample(&mut rng);
        std * draw
    };
    let theta_std = cfg.pipeline.rotation_prior_var.sqrt();
    let t_std = cfg.pipeline.translation_prior_var.sqrt();
    let pose = PoseParams::new(
        RotationAngles::new(gauss(theta_std), gauss(theta_std), gauss(theta_std)),
        Vector3::new(gauss(t_std), gauss(t_std), gauss(t_std)),
    );
    let motion = match cfg.scenario {
        Scenario::Stationary => None,
        Scenario::Moving => {
            let omega_std = cfg.pipeline.angular_rate_prior_var.sqrt();
            let v_std = cfg.pipeline.velocity_rate_prior_var.sqrt();
            Some(MotionParams::new(
                Vector3::new(gauss(omega_std), gauss(omega_std), gauss(omega_std)),
                Vector3::new(gauss(v_std), gauss(v_std), gauss(v_std)),
            ))
        }
    };
    (pose, motion)
}

fn noise_for(cfg: &ExperimentConfig, sigma: f64, trial: u64) -> NoiseModel {
    NoiseModel::coupled(
        sigma,
        cfg.doppler_factor,
        derive_seed(cfg.seed, trial, NOISE_STREAM),
    )
}

/// True per-sensor placement matching the configured truth rotation model.
fn truth_vectors(
    cfg: &ExperimentConfig,
    pose: &PoseParams,
    motion: Option<&MotionParams>,
) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let conf = &cfg.conformation;
    let model = cfg.pipeline.truth_rotation;
    let positions = (0..conf.num_sensors())
        .map(|n| transform_sensor(pose, &conf.sensor(n), model))
        .collect();
    let velocities = match motion {
        Some(motion) => (0..conf.num_sensors())
            .map(|n| sensor_velocity(pose, motion, &conf.sensor(n), model))
            .collect(),
        None => Vec::new(),
    };
    (positions, velocities)
}

#[derive(Clone, Copy, Default)]
struct FamilySample {
    sq_err: f64,
    iterations: f64,
    ms: f64,
}

#[derive(Clone, Default)]
struct EstimatorTrial {
    ok: bool,
    families: [FamilySample; 6],
}

fn mean_iterations<'a>(results: impl Iterator<Item = &'a crate::gabp::GabpResult>) -> f64 {
    let mut sum = 0.0;
    let mut count = 0.0_f64;
    for r in results {
        sum += r.iterations as f64;
        count += 1.0;
    }
    sum / count.max(1.0)
}

fn stationary_samples(
    est: &StationaryEstimate,
    pose: &PoseParams,
    s_truth: &[Vector3<f64>],
) -> [FamilySample; 6] {
    let mut out = [FamilySample::default(); 6];
    let pos_sq: f64 = est
        .sensors
        .iter()
        .zip(s_truth)
        .map(|(e, t)| (e.coords - t).norm_squared())
        .sum();
    out[Family::Position.index()] = FamilySample {
        sq_err: pos_sq,
        iterations: mean_iterations(est.sensors.iter().map(|s| &s.result)),
        ms: est.timings.position_ms,
    };
    out[Family::Translation.index()] = FamilySample {
        sq_err: (est.pose.translation - pose.translation).norm_squared(),
        iterations: est.pose.coarse.iterations as f64,
        ms: est.timings.pose_ms,
    };
    out[Family::Rotation.index()] = FamilySample {
        sq_err: (est.pose.rotation - pose.angles.as_vector()).norm_squared(),
        iterations: est.pose.refined.iterations as f64,
        ms: est.timings.pose_ms,
    };
    out
}

fn moving_samples(
    est: &MovingEstimate,
    pose: &PoseParams,
    motion: &MotionParams,
    s_truth: &[Vector3<f64>],
    v_truth: &[Vector3<f64>],
) -> [FamilySample; 6] {
    let stationary_view = StationaryEstimate {
        sensors: est.sensors.clone(),
        pose: est.pose.clone(),
        timings: est.timings,
    };
    let mut out = stationary_samples(&stationary_view, pose, s_truth);
    let vel_sq: f64 = est
        .velocities
        .iter()
        .zip(v_truth)
        .map(|(e, t)| (e.velocity - t).norm_squared())
        .sum();
    out[Family::Velocity.index()] = FamilySample {
        sq_err: vel_sq,
        iterations: mean_iterations(est.velocities.iter().map(|v| &v.result)),
        ms: est.timings.velocity_ms,
    };
    out[Family::TranslationalVelocity.index()] = FamilySample {
        sq_err: (est.motion.velocity - motion.velocity).norm_squared(),
        iterations: est.motion.coarse.iterations as f64,
        ms: est.timings.motion_ms,
    };
    out[Family::AngularVelocity.index()] = FamilySample {
        sq_err: (est.motion.angular_velocity - motion.angular_velocity).norm_squared(),
        iterations: est.motion.refined.iterations as f64,
        ms: est.timings.motion_ms,
    };
    out
}

/// Closed-form baseline estimates over the same systems the pipeline uses.
pub struct BaselineEstimate {
    pub positions: Vec<(Vector3<f64>, f64)>,
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
    pub velocities: Vec<(Vector3<f64>, f64)>,
    pub angular_velocity: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub timings: StageTimings,
}

fn solve(system: &LinearSystem, weighted: bool) -> Result<SolveReport, BaselineError> {
    if weighted {
        wls_solve(system)
    } else {
        ls_solve(system)
    }
}

/// Two-stage least-squares baseline mirroring the pipeline stages: per-sensor
/// solves, then one joint solve of the stacked pose (and motion) systems.
pub fn baseline_estimate(
    meas: &MeasurementSet,
    conformation: &Conformation,
    weighted: bool,
) -> Result<BaselineEstimate, HarnessError> {
    let n = conformation.num_sensors();
    let started = Instant::now();
    let mut positions = Vec::with_capacity(n);
    for j in 0..n {
        let system = build_position_system(meas, conformation, j)?;
        let report = solve(&system, weighted)?;
        positions.push((
            Vector3::new(report.estimate[0], report.estimate[1], report.estimate[2]),
            report.estimate[3],
        ));
    }
    let position_ms = started.elapsed().as_secs_f64() * 1e3;

    let started = Instant::now();
    let pose_systems: Vec<LinearSystem> = (0..n)
        .map(|j| build_pose_system(meas, conformation, j, positions[j].1.max(0.0)))
        .collect::<Result<_, _>>()?;
    let report = solve(&LinearSystem::stack(&pose_systems), weighted)?;
    let rotation = Vector3::new(report.estimate[0], report.estimate[1], report.estimate[2]);
    let translation = Vector3::new(report.estimate[3], report.estimate[4], report.estimate[5]);
    let pose_ms = started.elapsed().as_secs_f64() * 1e3;

    let mut velocities = Vec::new();
    let mut angular_velocity = Vector3::zeros();
    let mut velocity = Vector3::zeros();
    let mut velocity_ms = 0.0;
    let mut motion_ms = 0.0;
    if meas.dopplers.is_some() {
        let started = Instant::now();
        for j in 0..n {
            let system = build_velocity_system(meas, conformation, j)?;
            let report = solve(&system, weighted)?;
            velocities.push((
                Vector3::new(report.estimate[0], report.estimate[1], report.estimate[2]),
                report.estimate[3],
            ));
        }
        velocity_ms = started.elapsed().as_secs_f64() * 1e3;

        let started = Instant::now();
        let q_est = rotation_matrix_small(&RotationAngles::new(rotation.x, rotation.y, rotation.z));
        let motion_systems: Vec<LinearSystem> = (0..n)
            .map(|j| build_motion_system(meas, conformation, j, velocities[j].1, &q_est))
            .collect::<Result<_, _>>()?;
        let report = solve(&LinearSystem::stack(&motion_systems), weighted)?;
        angular_velocity = Vector3::new(report.estimate[0], report.estimate[1], report.estimate[2]);
        velocity = Vector3::new(report.estimate[3], report.estimate[4], report.estimate[5]);
        motion_ms = started.elapsed().as_secs_f64() * 1e3;
    }

    Ok(BaselineEstimate {
        positions,
        rotation,
        translation,
        velocities,
        angular_velocity,
        velocity,
        timings: StageTimings {
            position_ms,
            velocity_ms,
            pose_ms,
            motion_ms,
        },
    })
}

fn baseline_samples(
    est: &BaselineEstimate,
    pose: &PoseParams,
    motion: Option<&MotionParams>,
    s_truth: &[Vector3<f64>],
    v_truth: &[Vector3<f64>],
) -> [FamilySample; 6] {
    let mut out = [FamilySample::default(); 6];
    let pos_sq: f64 = est
        .positions
        .iter()
        .zip(s_truth)
        .map(|((coords, _), t)| (coords - t).norm_squared())
        .sum();
    out[Family::Position.index()] = FamilySample {
        sq_err: pos_sq,
        iterations: 0.0,
        ms: est.timings.position_ms,
    };
    out[Family::Translation.index()] = FamilySample {
        sq_err: (est.translation - pose.translation).norm_squared(),
        iterations: 0.0,
        ms: est.timings.pose_ms,
    };
    out[Family::Rotation.index()] = FamilySample {
        sq_err: (est.rotation - pose.angles.as_vector()).norm_squared(),
        iterations: 0.0,
        ms: est.timings.pose_ms,
    };
    if let Some(motion) = motion {
        let vel_sq: f64 = est
            .velocities
            .iter()
            .zip(v_truth)
            .map(|((coords, _), t)| (coords - t).norm_squared())
            .sum();
        out[Family::Velocity.index()] = FamilySample {
            sq_err: vel_sq,
            iterations: 0.0,
            ms: est.timings.velocity_ms,
        };
        out[Family::TranslationalVelocity.index()] = FamilySample {
            sq_err: (est.velocity - motion.velocity).norm_squared(),
            iterations: 0.0,
            ms: est.timings.motion_ms,
        };
        out[Family::AngularVelocity.index()] = FamilySample {
            sq_err: (est.angular_velocity - motion.angular_velocity).norm_squared(),
            iterations: 0.0,
            ms: est.timings.motion_ms,
        };
    }
    out
}

fn run_trial(cfg: &ExperimentConfig, sigma: f64, trial: u64) -> Vec<EstimatorTrial> {
    let (pose, motion) = draw_truth(cfg, trial);
    let noise = noise_for(cfg, sigma, trial);
    let (s_truth, v_truth) = truth_vectors(cfg, &pose, motion.as_ref());
    let conf = &cfg.conformation;

    cfg.estimators
        .iter()
        .map(|estimator| {
            let mut outcome = EstimatorTrial::default();
            match estimator {
                Estimator::Gabp | Estimator::Mfb => {
                    let pipeline = PipelineConfig {
                        matched_filter_bound: *estimator == Estimator::Mfb,
                        ..cfg.pipeline.clone()
                    };
                    match motion.as_ref() {
                        None => match run_stationary(conf, &pose, &noise, &pipeline) {
                            Ok(est) => {
                                outcome.ok = true;
                                outcome.families = stationary_samples(&est, &pose, &s_truth);
                            }
                            Err(_) => outcome.ok = false,
                        },
                        Some(motion_truth) => {
                            match run_moving(conf, &pose, motion_truth, &noise, &pipeline) {
                                Ok(est) => {
                                    outcome.ok = true;
                                    outcome.families = moving_samples(
                                        &est,
                                        &pose,
                                        motion_truth,
                                        &s_truth,
                                        &v_truth,
                                    );
                                }
                                Err(_) => outcome.ok = false,
                            }
                        }
                    }
                }
                Estimator::Ls | Estimator::Wls => {
                    let solved = simulate(
                        conf,
                        &pose,
                        motion.as_ref(),
                        &noise,
                        cfg.pipeline.truth_rotation,
                    )
                    .map_err(HarnessError::from)
                    .and_then(|meas| baseline_estimate(&meas, conf, *estimator == Estimator::Wls));
                    match solved {
                        Ok(est) => {
                            outcome.ok = true;
                            outcome.families =
                                baseline_samples(&est, &pose, motion.as_ref(), &s_truth, &v_truth);
                        }
                        Err(_) => outcome.ok = false,
                    }
                }
            }
            outcome
        })
        .collect()
}

/// Monte-Carlo RMSE sweep over the configured noise grid and estimators.
/// Output rows are ordered by (sigma, estimator, family).
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<RmseRecord>, HarnessError> {
    cfg.validate()?;
    let mut records = Vec::new();
    for &sigma in &cfg.sigma_grid {
        let trials: Vec<Vec<EstimatorTrial>> = (0..cfg.trials as u64)
            .into_par_iter()
            .map(|trial| run_trial(cfg, sigma, trial))
            .collect();
        for (e_idx, &estimator) in cfg.estimators.iter().enumerate() {
            let mut used = 0usize;
            let mut diverged = 0usize;
            let mut sums = [FamilySample::default(); 6];
            for trial in &trials {
                let outcome = &trial[e_idx];
                if !outcome.ok {
                    diverged += 1;
                    continue;
                }
                used += 1;
                for (sum, sample) in sums.iter_mut().zip(&outcome.families) {
                    sum.sq_err += sample.sq_err;
                    sum.iterations += sample.iterations;
                    sum.ms += sample.ms;
                }
            }
            for family in Family::ALL {
                if !family.in_scenario(cfg.scenario) {
                    continue;
                }
                let sum = &sums[family.index()];
                let divisor = used.max(1) as f64;
                records.push(RmseRecord {
                    sigma,
                    estimator,
                    family,
                    rmse: if used == 0 {
                        f64::NAN
                    } else {
                        (sum.sq_err / divisor).sqrt()
                    },
                    unit: family.unit(),
                    trials: used,
                    mean_iterations: sum.iterations / divisor,
                    mean_ms: if cfg.include_timing {
                        sum.ms / divisor
                    } else {
                        0.0
                    },
                    diverged,
                });
            }
        }
    }
    Ok(records)
}

pub const SWEEP_CSV_HEADER: &str =
    "sigma,estimator,family,rmse,unit,trials,mean_iters,mean_ms,diverged";

/// Render sweep records as CSV, one row per (sigma, estimator, family).
pub fn records_to_csv(records: &[RmseRecord]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{:.6e},{},{},{:.9e},{},{},{:.3},{:.4},{}\n",
            r.sigma,
            r.estimator,
            r.family,
            r.rmse,
            r.unit,
            r.trials,
            r.mean_iterations,
            r.mean_ms,
            r.diverged
        ));
    }
    out
}

/// One convergence trace: the median (over trials) estimate error after each
/// iteration of one algorithm at one noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRecord {
    pub sigma: f64,
    pub algorithm: Algorithm,
    pub median_error: Vec<f64>,
    pub trials: usize,
    pub diverged: usize,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Error-vs-truth of each per-iteration consensus, padded with its final
/// value to `len` entries.
fn padded_errors<F: Fn(&DVector<f64>) -> f64>(
    trace: &[DVector<f64>],
    len: usize,
    error: F,
) -> Vec<f64> {
    (0..len)
        .map(|j| error(&trace[j.min(trace.len() - 1)]))
        .collect()
}

/// Per-iteration convergence traces of the four algorithms on the moving
/// scenario, at the requested noise levels.
pub fn run_convergence(
    cfg: &ExperimentConfig,
    sigmas: &[f64],
) -> Result<Vec<ConvergenceRecord>, HarnessError> {
    cfg.validate()?;
    if sigmas.is_empty() {
        return Err(HarnessError::InvalidConfig("noise grid must be nonempty"));
    }
    let moving_cfg = ExperimentConfig {
        scenario: Scenario::Moving,
        ..cfg.clone()
    };
    let conf = &moving_cfg.conformation;
    let mut records = Vec::new();
    for &sigma in sigmas {
        struct TrialTraces {
            ok: bool,
            per_algorithm: [Vec<f64>; 4],
        }
        let len = moving_cfg.pipeline.max_iterations;
        let outcomes: Vec<TrialTraces> = (0..moving_cfg.trials as u64)
            .into_par_iter()
            .map(|trial| {
                let (pose, motion) = draw_truth(&moving_cfg, trial);
                let motion = motion.expect("moving scenario draws motion parameters");
                let noise = noise_for(&moving_cfg, sigma, trial);
                let (s_truth, v_truth) = truth_vectors(&moving_cfg, &pose, Some(&motion));
                match run_moving(conf, &pose, &motion, &noise, &moving_cfg.pipeline) {
                    Err(_) => TrialTraces {
                        ok: false,
                        per_algorithm: Default::default(),
                    },
                    Ok(est) => {
                        // Per-sensor linear stages: aggregate the per-iteration
                        // consensus errors over all sensors.
                        let mut position = vec![0.0; len];
                        for (n, sensor) in est.sensors.iter().enumerate() {
                            let errors = padded_errors(&sensor.result.iterate_trace, len, |c| {
                                (Vector3::new(c[0], c[1], c[2]) - s_truth[n]).norm_squared()
                            });
                            for (acc, e) in position.iter_mut().zip(errors) {
                                *acc += e;
                            }
                        }
                        let position: Vec<f64> = position.into_iter().map(f64::sqrt).collect();

                        let mut velocity = vec![0.0; len];
                        for (n, sensor) in est.velocities.iter().enumerate() {
                            let errors = padded_errors(&sensor.result.iterate_trace, len, |c| {
                                (Vector3::new(c[0], c[1], c[2]) - v_truth[n]).norm_squared()
                            });
                            for (acc, e) in velocity.iter_mut().zip(errors) {
                                *acc += e;
                            }
                        }
                        let velocity: Vec<f64> = velocity.into_iter().map(f64::sqrt).collect();

                        let mut pose_truth = DVector::zeros(6);
                        pose_truth
                            .rows_mut(0, 3)
                            .copy_from(&pose.angles.as_vector());
                        pose_truth.rows_mut(3, 3).copy_from(&pose.translation);
                        let pose_trace = padded_errors(&est.pose.coarse.iterate_trace, len, |c| {
                            (c - &pose_truth).norm()
                        });

                        let mut motion_truth = DVector::zeros(6);
                        motion_truth
                            .rows_mut(0, 3)
                            .copy_from(&motion.angular_velocity);
                        motion_truth.rows_mut(3, 3).copy_from(&motion.velocity);
                        let motion_trace =
                            padded_errors(&est.motion.coarse.iterate_trace, len, |c| {
                                (c - &motion_truth).norm()
                            });

                        TrialTraces {
                            ok: true,
                            per_algorithm: [position, pose_trace, velocity, motion_trace],
                        }
                    }
                }
            })
            .collect();

        let diverged = outcomes.iter().filter(|o| !o.ok).count();
        let used = outcomes.len() - diverged;
        for (a_idx, algorithm) in Algorithm::ALL.into_iter().enumerate() {
            let median_error: Vec<f64> = (0..len)
                .map(|j| {
                    let mut values: Vec<f64> = outcomes
                        .iter()
                        .filter(|o| o.ok)
                        .map(|o| o.per_algorithm[a_idx][j])
                        .collect();
                    median(&mut values)
                })
                .collect();
            records.push(ConvergenceRecord {
                sigma,
                algorithm,
                median_error,
                trials: used,
                diverged,
            });
        }
    }
    Ok(records)
}

pub const CONVERGENCE_CSV_HEADER: &str = "sigma,algorithm,iteration,median_error";

pub fn convergence_to_csv(records: &[ConvergenceRecord]) -> String {
    let mut out = String::from(CONVERGENCE_CSV_HEADER);
    out.push('\n');
    for r in records {
        for (j, e) in r.median_error.iter().enumerate() {
            out.push_str(&format!(
                "{:.6e},{},{},{:.9e}\n",
                r.sigma,
                r.algorithm,
                j + 1,
                e
            ));
        }
    }
    out
}

/// Median wall time of one full invocation of each algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeRecord {
    pub algorithm: Algorithm,
    pub median_ms: f64,
    pub reps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeReport {
    pub records: Vec<RuntimeRecord>,
    /// Median ms of the position stage with twice the anchors, for the
    /// scaling check.
    pub position_double_anchors_ms: f64,
}

/// Median per-invocation wall times of the four algorithms on the
/// configured layout (the 8-anchor/8-sensor cube by default), plus the
/// position stage on a 16-anchor layout for the scaling probe.
pub fn run_runtime(cfg: &ExperimentConfig, reps: usize) -> Result<RuntimeReport, HarnessError> {
    if reps == 0 {
        return Err(HarnessError::InvalidConfig("need at least one repetition"));
    }
    let moving_cfg = ExperimentConfig {
        scenario: Scenario::Moving,
        ..cfg.clone()
    };
    let conf = &moving_cfg.conformation;
    let (pose, motion) = draw_truth(&moving_cfg, 0);
    let motion = motion.expect("moving scenario draws motion parameters");
    let noise = noise_for(&moving_cfg, 0.1, 0);
    let meas = simulate(
        conf,
        &pose,
        Some(&motion),
        &noise,
        moving_cfg.pipeline.truth_rotation,
    )?;

    let pipeline = &moving_cfg.pipeline;
    let positions = crate::pipeline::estimate_positions(&meas, conf, pipeline)?;
    let velocities = crate::pipeline::estimate_velocities(&meas, conf, pipeline)?;
    let pose_est = crate::pipeline::estimate_pose(&meas, conf, &positions, pipeline)?;

    let mut samples: [Vec<f64>; 4] = Default::default();
    for _ in 0..reps {
        let started = Instant::now();
        let _ = crate::pipeline::estimate_positions(&meas, conf, pipeline)?;
        samples[0].push(started.elapsed().as_secs_f64() * 1e3);

        let started = Instant::now();
        let _ = crate::pipeline::estimate_pose(&meas, conf, &positions, pipeline)?;
        samples[1].push(started.elapsed().as_secs_f64() * 1e3);

        let started = Instant::now();
        let _ = crate::pipeline::estimate_velocities(&meas, conf, pipeline)?;
        samples[2].push(started.elapsed().as_secs_f64() * 1e3);

        let started = Instant::now();
        let _ = crate::pipeline::estimate_motion(
            &meas,
            conf,
            &positions,
            &velocities,
            &pose_est,
            None,
            pipeline,
        )?;
        samples[3].push(started.elapsed().as_secs_f64() * 1e3);
    }
    let records = Algorithm::ALL
        .into_iter()
        .zip(samples.iter_mut())
        .map(|(algorithm, times)| RuntimeRecord {
            algorithm,
            median_ms: median(times),
            reps,
        })
        .collect();

    let doubled = doubled_anchor_conformation();
    let meas16 = simulate(
        &doubled,
        &pose,
        Some(&motion),
        &noise,
        moving_cfg.pipeline.truth_rotation,
    )?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let started = Instant::now();
        let _ = crate::pipeline::estimate_positions(&meas16, &doubled, pipeline)?;
        times.push(started.elapsed().as_secs_f64() * 1e3);
    }

    Ok(RuntimeReport {
        records,
        position_double_anchors_ms: median(&mut times),
    })
}

pub const RUNTIME_CSV_HEADER: &str = "algorithm,median_ms,reps";

pub fn runtime_to_csv(report: &RuntimeReport) -> String {
    let mut out = String::from(RUNTIME_CSV_HEADER);
    out.push('\n');
    for r in &report.records {
        out.push_str(&format!("{},{:.4},{}\n", r.algorithm, r.median_ms, r.reps));
    }
    out.push_str(&format!(
        "position-gabp-16-anchors,{:.4},{}\n",
        report.position_double_anchors_ms,
        report.records.first().map_or(0, |r| r.reps)
    ));
    out
}

/// Human-readable dump of the fully resolved configuration, written next to
/// every output file.
pub fn manifest(cfg: &ExperimentConfig) -> String {
    let p = &cfg.pipeline;
    let estimators: Vec<String> = cfg.estimators.iter().map(|e| e.to_string()).collect();
    let sigmas: Vec<String> = cfg.sigma_grid.iter().map(|s| format!("{s:e}")).collect();
    format!(
        "scenario = {}\n\
         sigma_grid = {}\n\
         trials = {}\n\
         seed = {}\n\
         estimators = {}\n\
         doppler_factor = {}\n\
         damping = {}\n\
         max_iterations = {}\n\
         tolerance = {:e}\n\
         position_prior_var = {:e}\n\
         velocity_prior_var = {:e}\n\
         rotation_prior_var_rad2 = {:e}\n\
         translation_prior_var = {:e}\n\
         angular_rate_prior_var_rad2 = {:e}\n\
         velocity_rate_prior_var = {:e}\n\
         q_source = {:?}\n\
         aux_source = {:?}\n\
         stacking = {:?}\n\
         truth_rotation = {:?}\n\
         matched_filter_bound = {}\n\
         include_timing = {}\n\
         anchors = {}\n\
         sensors = {}\n",
        cfg.scenario,
        sigmas.join(","),
        cfg.trials,
        cfg.seed,
        estimators.join(","),
        cfg.doppler_factor,
        p.damping,
        p.max_iterations,
        p.tolerance,
        p.position_prior_var,
        p.velocity_prior_var,
        p.rotation_prior_var,
        p.translation_prior_var,
        p.angular_rate_prior_var,
        p.velocity_rate_prior_var,
        p.q_source,
        p.aux_source,
        p.stacking,
        p.truth_rotation,
        p.matched_filter_bound,
        cfg.include_timing,
        cfg.conformation.num_anchors(),
        cfg.conformation.num_sensors(),
    )
}

/// Path of the manifest written alongside an output file.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    name.push_str(".manifest.txt");
    output.with_file_name(name)
}

/// Write a CSV payload plus the config manifest next to it.
pub fn write_output(cfg: &ExperimentConfig, csv: &str, path: &Path) -> Result<(), HarnessError> {
    std::fs::write(path, csv)?;
    std::fs::write(manifest_path(path), manifest(cfg))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rmse_examples() {
        let zero = vec![DVector::from_vec(vec![1.0, 2.0])];
        assert_eq!(rmse(&zero, &zero).unwrap(), 0.0);
        let est = vec![DVector::from_vec(vec![3.0, 4.0])];
        let truth = vec![DVector::zeros(2)];
        assert_abs_diff_eq!(rmse(&est, &truth).unwrap(), 5.0, epsilon = 1e-15);
        // Two trials with error norms 1 and 3 give sqrt(5).
        let est = vec![
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![0.0, 3.0]),
        ];
        let truth = vec![DVector::zeros(2), DVector::zeros(2)];
        assert_abs_diff_eq!(rmse(&est, &truth).unwrap(), 5.0_f64.sqrt(), epsilon = 1e-15);
        assert!(matches!(
            rmse(&est, &truth[..1]),
            Err(HarnessError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn default_conformation_matches_the_cube_layout() {
        let conf = default_conformation();
        assert_eq!(conf.num_sensors(), 8);
        assert_eq!(conf.num_anchors(), 8);
        assert_eq!(conf.sensor(0), Vector3::new(-0.5, -0.5, -0.5));
        assert_eq!(conf.anchor(7), Vector3::new(10.0, 10.0, 10.0));
        // All inter-sensor distances are cube distances: 1, sqrt2 or sqrt3.
        let allowed = [1.0, 2.0_f64.sqrt(), 3.0_f64.sqrt()];
        for i in 0..8 {
            for j in (i + 1)..8 {
                let d = (conf.sensor(i) - conf.sensor(j)).norm();
                assert!(
                    allowed.iter().any(|&a| (d - a).abs() < 1e-12),
                    "unexpected inter-sensor distance {d}"
                );
            }
        }
    }

    #[test]
    fn conformation_file_round_trip() {
        let conf = default_conformation();
        let text = format_conformation(&conf);
        let parsed = parse_conformation(&text).unwrap();
        assert_eq!(parsed, conf);
    }

    #[test]
    fn conformation_parser_rejects_malformed_input() {
        assert!(parse_conformation("").is_err());
        assert!(parse_conformation("5 1\n1 2 3\n").is_err()); // missing rows
        assert!(parse_conformation("1 1 1\n").is_err()); // bad header
        let mut text = format_conformation(&default_conformation());
        text.push_str("1 2 3\n");
        assert!(parse_conformation(&text).is_err()); // trailing rows
    }

    #[test]
    fn seed_derivation_separates_streams() {
        let a = derive_seed(1, 0, PARAM_STREAM);
        let b = derive_seed(1, 0, NOISE_STREAM);
        let c = derive_seed(1, 1, PARAM_STREAM);
        let d = derive_seed(2, 0, PARAM_STREAM);
        assert!(a != b && a != c && a != d);
    }

    fn tiny_config(scenario: Scenario) -> ExperimentConfig {
        ExperimentConfig {
            trials: 8,
            sigma_grid: vec![0.1],
            include_timing: false,
            ..ExperimentConfig::new(scenario)
        }
    }

    #[test]
    fn sweep_is_deterministic_and_csv_stable() {
        let cfg = tiny_config(Scenario::Moving);
        let a = records_to_csv(&run_sweep(&cfg).unwrap());
        let b = records_to_csv(&run_sweep(&cfg).unwrap());
        assert_eq!(a, b);
        assert!(a.starts_with(SWEEP_CSV_HEADER));
        // Header plus one row per (sigma, estimator, family).
        assert_eq!(a.lines().count(), 1 + 2 * 6);
    }

    #[test]
    fn estimator_selection_does_not_change_results() {
        // Per-trial RNG streams depend only on the master seed and trial
        // index, so adding estimators to a sweep leaves the others' numbers
        // untouched.
        let alone = run_sweep(&tiny_config(Scenario::Moving)).unwrap();
        let cfg = ExperimentConfig {
            estimators: vec![
                Estimator::Gabp,
                Estimator::Ls,
                Estimator::Wls,
                Estimator::Mfb,
            ],
            ..tiny_config(Scenario::Moving)
        };
        let together = run_sweep(&cfg).unwrap();
        for record in &alone {
            let twin = together
                .iter()
                .find(|r| {
                    r.sigma == record.sigma
                        && r.estimator == record.estimator
                        && r.family == record.family
                })
                .unwrap();
            assert_eq!(record.rmse, twin.rmse);
        }
    }

    #[test]
    fn diverged_trials_are_counted_and_excluded() {
        // A two-sensor body leaves the rotation about the sensor axis
        // unobservable, so the least-squares pose solve is singular on every
        // trial; the sweep flags the trials instead of failing.
        let base = default_conformation();
        let body = DMatrix::from_fn(3, 2, |r, c| base.body()[(r, c)]);
        let degenerate = crate::geometry::Conformation::new(body, base.anchors().clone()).unwrap();
        let cfg = ExperimentConfig {
            trials: 6,
            sigma_grid: vec![0.1],
            estimators: vec![Estimator::Ls],
            conformation: degenerate,
            include_timing: false,
            ..ExperimentConfig::new(Scenario::Stationary)
        };
        let records = run_sweep(&cfg).unwrap();
        for r in &records {
            assert_eq!(r.diverged, 6);
            assert_eq!(r.trials, 0);
            assert!(r.rmse.is_nan());
        }
    }

    #[test]
    fn sweep_supports_all_estimators() {
        let cfg = ExperimentConfig {
            trials: 30,
            sigma_grid: vec![0.1],
            estimators: vec![
                Estimator::Gabp,
                Estimator::Ls,
                Estimator::Wls,
                Estimator::Mfb,
            ],
            include_timing: false,
            ..ExperimentConfig::new(Scenario::Moving)
        };
        let records = run_sweep(&cfg).unwrap();
        assert_eq!(records.len(), 4 * 6);
        assert!(records
            .iter()
            .all(|r| r.rmse.is_finite() && r.diverged == 0));
        let position = |estimator: Estimator| -> f64 {
            records
                .iter()
                .find(|r| r.estimator == estimator && r.family == Family::Position)
                .unwrap()
                .rmse
        };
        assert!(position(Estimator::Wls) <= position(Estimator::Ls));
        // Direct solvers report no iterations.
        assert!(records
            .iter()
            .filter(|r| matches!(r.estimator, Estimator::Ls | Estimator::Wls))
            .all(|r| r.mean_iterations == 0.0));
    }

    #[test]
    fn sweep_recovers_noiseless_positions() {
        let cfg = ExperimentConfig {
            sigma_grid: vec![0.0],
            trials: 4,
            estimators: vec![Estimator::Gabp],
            pipeline: PipelineConfig {
                max_iterations: 200,
                tolerance: 1e-12,
                ..PipelineConfig::default()
            },
            include_timing: false,
            ..ExperimentConfig::new(Scenario::Stationary)
        };
        let records = run_sweep(&cfg).unwrap();
        let position = records
            .iter()
            .find(|r| r.family == Family::Position)
            .unwrap();
        assert!(
            position.rmse < 1e-5,
            "noiseless position RMSE {}",
            position.rmse
        );
        assert_eq!(position.diverged, 0);
    }

    #[test]
    fn sweep_rmse_grows_with_noise() {
        let cfg = ExperimentConfig {
            sigma_grid: vec![1e-2, 1e-1, 1.0],
            trials: 500,
            estimators: vec![Estimator::Gabp],
            include_timing: false,
            ..ExperimentConfig::new(Scenario::Stationary)
        };
        let records = run_sweep(&cfg).unwrap();
        for family in [Family::Position, Family::Translation] {
            let rmses: Vec<f64> = records
                .iter()
                .filter(|r| r.family == family)
                .map(|r| r.rmse)
                .collect();
            assert_eq!(rmses.len(), 3);
            assert!(
                rmses[0] < rmses[1] && rmses[1] < rmses[2],
                "{family}: {rmses:?}"
            );
        }
    }

    #[test]
    fn mfb_convergence_trace_is_flat_without_noise() {
        // Truth-seeded replicas are a fixed point of the noiseless
        // small-angle-generated system: every stage stops after one
        // iteration and the error traces stay at their initial values.
        let cfg = ExperimentConfig {
            trials: 4,
            include_timing: false,
            pipeline: PipelineConfig {
                matched_filter_bound: true,
                truth_rotation: crate::geometry::RotationModel::SmallAngle,
                ..PipelineConfig::default()
            },
            ..ExperimentConfig::new(Scenario::Moving)
        };
        let records = run_convergence(&cfg, &[0.0]).unwrap();
        for r in &records {
            let first = r.median_error[0];
            assert!(
                r.median_error.iter().all(|&e| (e - first).abs() <= 1e-9),
                "{} trace moved: {:?}",
                r.algorithm,
                r.median_error
            );
        }
    }

    #[test]
    fn sweep_validates_config() {
        let mut cfg = tiny_config(Scenario::Stationary);
        cfg.sigma_grid.clear();
        assert!(matches!(
            run_sweep(&cfg),
            Err(HarnessError::InvalidConfig(_))
        ));
        let mut cfg = tiny_config(Scenario::Stationary);
        cfg.trials = 0;
        assert!(run_sweep(&cfg).is_err());
    }

    #[test]
    fn convergence_traces_have_bounded_length() {
        let cfg = tiny_config(Scenario::Moving);
        let records = run_convergence(&cfg, &[0.1]).unwrap();
        assert_eq!(records.len(), 4);
        for r in &records {
            assert!(r.median_error.len() <= cfg.pipeline.max_iterations);
            assert_eq!(r.diverged, 0);
            assert!(r.median_error.iter().all(|e| e.is_finite()));
        }
        let csv = convergence_to_csv(&records);
        assert!(csv.starts_with(CONVERGENCE_CSV_HEADER));
    }

    #[test]
    fn runtime_report_covers_all_algorithms() {
        let cfg = tiny_config(Scenario::Moving);
        let report = run_runtime(&cfg, 5).unwrap();
        assert_eq!(report.records.len(), 4);
        assert!(report.records.iter().all(|r| r.median_ms > 0.0));
        assert!(report.position_double_anchors_ms > 0.0);
        let csv = runtime_to_csv(&report);
        assert_eq!(csv.lines().count(), 1 + 5);
    }

    #[test]
    fn manifest_lists_resolved_values() {
        let cfg = tiny_config(Scenario::Moving);
        let text = manifest(&cfg);
        assert!(text.contains("scenario = moving"));
        assert!(text.contains("trials = 8"));
        assert!(text.contains("anchors = 8"));
        assert_eq!(
            manifest_path(Path::new("out/sweep.csv")),
            PathBuf::from("out/sweep.manifest.txt")
        );
    }
}
