//! The four estimation stages composed into end-to-end estimators.
//!
//! Stationary: simulate → per-sensor position GaBP → stacked bivariate pose
//! GaBP with interference-cancellation refinement of the rotation angles.
//! Moving: additionally per-sensor velocity GaBP and a stacked bivariate
//! motion GaBP with the same refinement applied to the angular velocity.
//!
//! Ground truth is placed with the exact rotation by default while the
//! estimators work on the small-angle model, reproducing the modeling
//! mismatch (and its low-noise rotation error floor). The bivariate stages
//! run on the N·M-row system stacked over all sensors, since the pose and
//! motion parameters are shared across the body; a per-sensor-average mode
//! is available for comparison.

use crate::baseline::BlockPrior;
use crate::gabp::{
    bivariate_gabp, ic_refine, linear_gabp, GabpConfig, GabpError, GabpResult, InitMode,
};
use crate::geometry::{
    rotation_matrix_exact, rotation_matrix_small, sensor_velocity, transform_sensor, Conformation,
    MotionParams, PoseParams, RotationAngles, RotationMatrix, RotationModel,
};
use crate::measurement::{
    build_motion_system, build_pose_system, build_position_system, build_velocity_system, simulate,
    LinearSystem, MeasurementError, MeasurementSet, NoiseModel,
};
use nalgebra::{DVector, Vector3};
use rayon::prelude::*;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("position stage failed for sensor {sensor}: {source}")]
    Position { sensor: usize, source: GabpError },
    #[error("velocity stage failed for sensor {sensor}: {source}")]
    Velocity { sensor: usize, source: GabpError },
    #[error("pose stage failed: {source}")]
    Pose { source: GabpError },
    #[error("motion stage failed: {source}")]
    Motion { source: GabpError },
    #[error(transparent)]
    Measurement(#[from] MeasurementError),
    #[error("rotation ground truth is required when q_source is Truth")]
    MissingTruthRotation,
}

/// Which rotation estimate parameterizes the angular-velocity channel block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QSource {
    /// Small-angle matrix built from the estimated pose angles.
    #[default]
    SmallAngleEstimate,
    /// Identity matrix (pure small-angle prior).
    Identity,
    /// The true rotation, when the caller can supply it (ablation runs).
    Truth,
}

/// Where the auxiliary scalars (‖s_n‖² for the pose stage, s_nᵀṡ_n for the
/// motion stage) come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AuxSource {
    /// The dedicated fourth unknown of the preceding linear stage.
    #[default]
    FourthEntry,
    /// Recomputed from the estimated coordinate entries.
    FromCoordinates,
}

/// How the shared pose/motion parameters combine information across sensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stacking {
    /// One bivariate run over the N·M-row stacked system.
    #[default]
    Joint,
    /// One bivariate run per sensor, consensus averaged over sensors.
    PerSensorAverage,
}

/// End-to-end estimator configuration. Prior variances use radians; the
/// degree-based values quoted for the evaluation setup are converted with
/// [`deg_sq_to_rad_sq`] at this boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub damping: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Prior variance of the per-sensor position unknowns [s; ‖s‖²] (weak).
    pub position_prior_var: f64,
    /// Prior variance of the per-sensor velocity unknowns [ṡ; sᵀṡ] (weak).
    pub velocity_prior_var: f64,
    /// Prior variance of each rotation angle, rad².
    pub rotation_prior_var: f64,
    /// Prior variance of each translation component, m².
    pub translation_prior_var: f64,
    /// Prior variance of each angular-velocity component, (rad/s)².
    pub angular_rate_prior_var: f64,
    /// Prior variance of each translational-velocity component, (m/s)².
    pub velocity_rate_prior_var: f64,
    pub q_source: QSource,
    pub aux_source: AuxSource,
    pub stacking: Stacking,
    /// Rotation model used to place the ground-truth sensors in `run_*`.
    pub truth_rotation: RotationModel,
    /// Seed all stages with true values (matched filter bound).
    pub matched_filter_bound: bool,
}

/// deg² → rad² conversion for the prior variances quoted in degrees.
pub fn deg_sq_to_rad_sq(value: f64) -> f64 {
    value * (std::f64::consts::PI / 180.0).powi(2)
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            damping: 0.5,
            max_iterations: 30,
            tolerance: 1e-8,
            position_prior_var: 1e6,
            velocity_prior_var: 1e6,
            rotation_prior_var: deg_sq_to_rad_sq(10.0),
            translation_prior_var: 5.0,
            angular_rate_prior_var: deg_sq_to_rad_sq(10.0),
            velocity_rate_prior_var: 5.0,
            q_source: QSource::default(),
            aux_source: AuxSource::default(),
            stacking: Stacking::default(),
            truth_rotation: RotationModel::Exact,
            matched_filter_bound: false,
        }
    }
}

impl PipelineConfig {
    fn gabp(&self, priors: Vec<BlockPrior>, init: InitMode) -> GabpConfig {
        GabpConfig {
            damping: self.damping,
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
            priors,
            init,
        }
    }
}

/// Per-sensor output of the position stage: coordinates and the dedicated
/// squared-norm unknown, with the full engine result attached.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorEstimate {
    pub coords: Vector3<f64>,
    pub norm_sq: f64,
    pub result: GabpResult,
}

/// Per-sensor output of the velocity stage: velocity coordinates and the
/// dedicated position-velocity inner-product unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityEstimate {
    pub velocity: Vector3<f64>,
    pub inner: f64,
    pub result: GabpResult,
}

/// Pose stage output: refined rotation angles, coarse-stage translation, and
/// both engine results.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
    pub rotation_coarse: Vector3<f64>,
    pub coarse: GabpResult,
    pub refined: GabpResult,
}

impl PoseEstimate {
    pub fn angles(&self) -> RotationAngles {
        RotationAngles::new(self.rotation.x, self.rotation.y, self.rotation.z)
    }
}

/// Motion stage output: refined angular velocity, coarse-stage translational
/// velocity, and both engine results.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionEstimate {
    pub angular_velocity: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub angular_velocity_coarse: Vector3<f64>,
    pub coarse: GabpResult,
    pub refined: GabpResult,
}

/// Wall time spent in each stage of a `run_*` call, milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimings {
    pub position_ms: f64,
    pub velocity_ms: f64,
    pub pose_ms: f64,
    pub motion_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryEstimate {
    pub sensors: Vec<SensorEstimate>,
    pub pose: PoseEstimate,
    pub timings: StageTimings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MovingEstimate {
    pub sensors: Vec<SensorEstimate>,
    pub velocities: Vec<VelocityEstimate>,
    pub pose: PoseEstimate,
    pub motion: MotionEstimate,
    pub timings: StageTimings,
}

/// True unknown vectors of every stage, used by matched-filter-bound runs to
/// seed the soft replicas. Only the initialization is touched: the systems
/// themselves (including the norm and inner-product auxiliaries) stay the
/// ones the standard pipeline builds.
struct TruthSeeds {
    position: Vec<DVector<f64>>,
    velocity: Vec<DVector<f64>>,
    pose: DVector<f64>,
    motion: DVector<f64>,
}

impl TruthSeeds {
    fn new(
        conformation: &Conformation,
        pose: &PoseParams,
        motion: Option<&MotionParams>,
        model: RotationModel,
    ) -> Self {
        let n = conformation.num_sensors();
        let mut position = Vec::with_capacity(n);
        let mut velocity = Vec::with_capacity(n);
        for j in 0..n {
            let s = transform_sensor(pose, &conformation.sensor(j), model);
            position.push(DVector::from_vec(vec![s.x, s.y, s.z, s.norm_squared()]));
            if let Some(motion) = motion {
                let v = sensor_velocity(pose, motion, &conformation.sensor(j), model);
                velocity.push(DVector::from_vec(vec![v.x, v.y, v.z, s.dot(&v)]));
            }
        }
        let pose_vec = {
            let mut p = DVector::zeros(6);
            p.rows_mut(0, 3).copy_from(&pose.angles.as_vector());
            p.rows_mut(3, 3).copy_from(&pose.translation);
            p
        };
        let motion_vec = match motion {
            Some(motion) => {
                let mut m = DVector::zeros(6);
                m.rows_mut(0, 3).copy_from(&motion.angular_velocity);
                m.rows_mut(3, 3).copy_from(&motion.velocity);
                m
            }
            None => DVector::zeros(6),
        };
        Self {
            position,
            velocity,
            pose: pose_vec,
            motion: motion_vec,
        }
    }
}

fn position_stage(
    meas: &MeasurementSet,
    conformation: &Conformation,
    config: &PipelineConfig,
    seeds: Option<&TruthSeeds>,
) -> Result<Vec<SensorEstimate>, PipelineError> {
    // Sensors are independent here; fan out and keep sensor order.
    (0..conformation.num_sensors())
        .into_par_iter()
        .map(|n| {
            let system = build_position_system(meas, conformation, n)?;
            let init = match seeds {
                Some(seeds) => InitMode::Truth(seeds.position[n].clone()),
                None => InitMode::Zeros,
            };
            let gabp = config.gabp(vec![BlockPrior::zero_mean(config.position_prior_var)], init);
            let result = linear_gabp(&system, &gabp)
                .map_err(|source| PipelineError::Position { sensor: n, source })?;
            Ok(SensorEstimate {
                coords: Vector3::new(
                    result.consensus[0],
                    result.consensus[1],
                    result.consensus[2],
                ),
                norm_sq: result.consensus[3],
                result,
            })
        })
        .collect()
}

fn velocity_stage(
    meas: &MeasurementSet,
    conformation: &Conformation,
    config: &PipelineConfig,
    seeds: Option<&TruthSeeds>,
) -> Result<Vec<VelocityEstimate>, PipelineError> {
    (0..conformation.num_sensors())
        .into_par_iter()
        .map(|n| {
            let system = build_velocity_system(meas, conformation, n)?;
            let init = match seeds {
                Some(seeds) => InitMode::Truth(seeds.velocity[n].clone()),
                None => InitMode::Zeros,
            };
            let gabp = config.gabp(vec![BlockPrior::zero_mean(config.velocity_prior_var)], init);
            let result = linear_gabp(&system, &gabp)
                .map_err(|source| PipelineError::Velocity { sensor: n, source })?;
            Ok(VelocityEstimate {
                velocity: Vector3::new(
                    result.consensus[0],
                    result.consensus[1],
                    result.consensus[2],
                ),
                inner: result.consensus[3],
                result,
            })
        })
        .collect()
}

/// Weighted-by-nothing mean of per-sensor consensus vectors, for the
/// per-sensor-average stacking mode.
fn average_results(results: Vec<(GabpResult, GabpResult)>) -> (GabpResult, GabpResult) {
    let n = results.len() as f64;
    let (mut coarse_acc, mut refined_acc) = results[0].clone();
    for (coarse, refined) in results.iter().skip(1) {
        coarse_acc.consensus += &coarse.consensus;
        coarse_acc.denoised += &coarse.denoised;
        refined_acc.consensus += &refined.consensus;
        refined_acc.denoised += &refined.denoised;
        coarse_acc.iterations = coarse_acc.iterations.max(coarse.iterations);
        refined_acc.iterations = refined_acc.iterations.max(refined.iterations);
    }
    coarse_acc.consensus /= n;
    coarse_acc.denoised /= n;
    refined_acc.consensus /= n;
    refined_acc.denoised /= n;
    (coarse_acc, refined_acc)
}

fn bivariate_with_refinement(
    systems: &[LinearSystem],
    priors: Vec<BlockPrior>,
    init: InitMode,
    config: &PipelineConfig,
) -> Result<(GabpResult, GabpResult), GabpError> {
    let gabp = config.gabp(priors, init);
    match config.stacking {
        Stacking::Joint => {
            let stacked = LinearSystem::stack(systems);
            let coarse = bivariate_gabp(&stacked, &gabp)?;
            let refined = ic_refine(&stacked, &coarse, &gabp)?;
            Ok((coarse, refined))
        }
        Stacking::PerSensorAverage => {
            let per_sensor = systems
                .iter()
                .map(|system| {
                    let coarse = bivariate_gabp(system, &gabp)?;
                    let refined = ic_refine(system, &coarse, &gabp)?;
                    Ok((coarse, refined))
                })
                .collect::<Result<Vec<_>, GabpError>>()?;
            Ok(average_results(per_sensor))
        }
    }
}

fn pose_stage(
    meas: &MeasurementSet,
    conformation: &Conformation,
    norm_sq: &[f64],
    config: &PipelineConfig,
    seeds: Option<&TruthSeeds>,
) -> Result<PoseEstimate, PipelineError> {
    let systems = (0..conformation.num_sensors())
        .map(|n| build_pose_system(meas, conformation, n, norm_sq[n].max(0.0)))
        .collect::<Result<Vec<_>, _>>()?;
    let priors = vec![
        BlockPrior::zero_mean(config.rotation_prior_var),
        BlockPrior::zero_mean(config.translation_prior_var),
    ];
    let init = match seeds {
        Some(seeds) => InitMode::Truth(seeds.pose.clone()),
        None => InitMode::Zeros,
    };
    let (coarse, refined) = bivariate_with_refinement(&systems, priors, init, config)
        .map_err(|source| PipelineError::Pose { source })?;
    let theta_coarse = coarse.block(0);
    let t = coarse.block(1);
    let theta = refined.consensus.clone();
    Ok(PoseEstimate {
        rotation: Vector3::new(theta[0], theta[1], theta[2]),
        translation: Vector3::new(t[0], t[1], t[2]),
        rotation_coarse: Vector3::new(theta_coarse[0], theta_coarse[1], theta_coarse[2]),
        coarse,
        refined,
    })
}

fn motion_stage(
    meas: &MeasurementSet,
    conformation: &Conformation,
    inner: &[f64],
    q_est: &RotationMatrix,
    config: &PipelineConfig,
    seeds: Option<&TruthSeeds>,
) -> Result<MotionEstimate, PipelineError> {
    let systems = (0..conformation.num_sensors())
        .map(|n| build_motion_system(meas, conformation, n, inner[n], q_est))
        .collect::<Result<Vec<_>, _>>()?;
    let priors = vec![
        BlockPrior::zero_mean(config.angular_rate_prior_var),
        BlockPrior::zero_mean(config.velocity_rate_prior_var),
    ];
    let init = match seeds {
        Some(seeds) => InitMode::Truth(seeds.motion.clone()),
        None => InitMode::Zeros,
    };
    let (coarse, refined) = bivariate_with_refinement(&systems, priors, init, config)
        .map_err(|source| PipelineError::Motion { source })?;
    let omega_coarse = coarse.block(0);
    let t_dot = coarse.block(1);
    let omega = refined.consensus.clone();
    Ok(MotionEstimate {
        angular_velocity: Vector3::new(omega[0], omega[1], omega[2]),
        velocity: Vector3::new(t_dot[0], t_dot[1], t_dot[2]),
        angular_velocity_coarse: Vector3::new(omega_coarse[0], omega_coarse[1], omega_coarse[2]),
        coarse,
        refined,
    })
}

/// Per-sensor position estimation (the linear range stage) on its own.
pub fn estimate_positions(
    meas: &MeasurementSet,
    conformation: &Conformation,
    config: &PipelineConfig,
) -> Result<Vec<SensorEstimate>, PipelineError> {
    position_stage(meas, conformation, config, None)
}

/// Per-sensor velocity estimation (the linear Doppler stage) on its own.
pub fn estimate_velocities(
    meas: &MeasurementSet,
    conformation: &Conformation,
    config: &PipelineConfig,
) -> Result<Vec<VelocityEstimate>, PipelineError> {
    velocity_stage(meas, conformation, config, None)
}

/// Pose estimation from range measurements and per-sensor norm estimates:
/// stacked bivariate GaBP for (θ, t), then interference-cancellation
/// refinement of θ.
pub fn estimate_pose(
    meas: &MeasurementSet,
    conformation: &Conformation,
    positions: &[SensorEstimate],
    config: &PipelineConfig,
) -> Result<PoseEstimate, PipelineError> {
    let norm_sq: Vec<f64> = positions
        .iter()
        .map(|p| match config.aux_source {
            AuxSource::FourthEntry => p.norm_sq,
            AuxSource::FromCoordinates => p.coords.norm_squared(),
        })
        .collect();
    pose_stage(meas, conformation, &norm_sq, config, None)
}

/// Motion estimation from Doppler measurements, per-sensor inner-product
/// estimates, and the pose estimate parameterizing the angular channel.
///
/// `q_truth` is consulted only when the configuration selects
/// [`QSource::Truth`].
pub fn estimate_motion(
    meas: &MeasurementSet,
    conformation: &Conformation,
    positions: &[SensorEstimate],
    velocities: &[VelocityEstimate],
    pose: &PoseEstimate,
    q_truth: Option<&RotationMatrix>,
    config: &PipelineConfig,
) -> Result<MotionEstimate, PipelineError> {
    let inner: Vec<f64> = positions
        .iter()
        .zip(velocities)
        .map(|(p, v)| match config.aux_source {
            AuxSource::FourthEntry => v.inner,
            AuxSource::FromCoordinates => p.coords.dot(&v.velocity),
        })
        .collect();
    let q_est = resolve_q(pose, q_truth, config)?;
    motion_stage(meas, conformation, &inner, &q_est, config, None)
}

fn resolve_q(
    pose: &PoseEstimate,
    q_truth: Option<&RotationMatrix>,
    config: &PipelineConfig,
) -> Result<RotationMatrix, PipelineError> {
    Ok(match config.q_source {
        QSource::SmallAngleEstimate => rotation_matrix_small(&pose.angles()),
        QSource::Identity => RotationMatrix::identity(),
        QSource::Truth => *q_truth.ok_or(PipelineError::MissingTruthRotation)?,
    })
}

/// Full stationary pipeline: simulate, estimate positions, estimate pose.
pub fn run_stationary(
    conformation: &Conformation,
    pose: &PoseParams,
    noise: &NoiseModel,
    config: &PipelineConfig,
) -> Result<StationaryEstimate, PipelineError> {
    let meas = simulate(conformation, pose, None, noise, config.truth_rotation)?;
    let seeds = config
        .matched_filter_bound
        .then(|| TruthSeeds::new(conformation, pose, None, config.truth_rotation));
    let mut timings = StageTimings::default();

    let started = Instant::now();
    let sensors = position_stage(&meas, conformation, config, seeds.as_ref())?;
    timings.position_ms = started.elapsed().as_secs_f64() * 1e3;

    let norm_sq: Vec<f64> = sensors
        .iter()
        .map(|p| match config.aux_source {
            AuxSource::FourthEntry => p.norm_sq,
            AuxSource::FromCoordinates => p.coords.norm_squared(),
        })
        .collect();
    let started = Instant::now();
    let pose_est = pose_stage(&meas, conformation, &norm_sq, config, seeds.as_ref())?;
    timings.pose_ms = started.elapsed().as_secs_f64() * 1e3;

    Ok(StationaryEstimate {
        sensors,
        pose: pose_est,
        timings,
    })
}

/// Full moving pipeline: simulate, then position, velocity, pose and motion
/// stages in that order.
pub fn run_moving(
    conformation: &Conformation,
    pose: &PoseParams,
    motion: &MotionParams,
    noise: &NoiseModel,
    config: &PipelineConfig,
) -> Result<MovingEstimate, PipelineError> {
    let meas = simulate(
        conformation,
        pose,
        Some(motion),
        noise,
        config.truth_rotation,
    )?;
    let seeds = config
        .matched_filter_bound
        .then(|| TruthSeeds::new(conformation, pose, Some(motion), config.truth_rotation));
    let mut timings = StageTimings::default();

    let started = Instant::now();
    let sensors = position_stage(&meas, conformation, config, seeds.as_ref())?;
    timings.position_ms = started.elapsed().as_secs_f64() * 1e3;

    let started = Instant::now();
    let velocities = velocity_stage(&meas, conformation, config, seeds.as_ref())?;
    timings.velocity_ms = started.elapsed().as_secs_f64() * 1e3;

    let norm_sq: Vec<f64> = sensors
        .iter()
        .map(|p| match config.aux_source {
            AuxSource::FourthEntry => p.norm_sq,
            AuxSource::FromCoordinates => p.coords.norm_squared(),
        })
        .collect();
    let started = Instant::now();
    let pose_est = pose_stage(&meas, conformation, &norm_sq, config, seeds.as_ref())?;
    timings.pose_ms = started.elapsed().as_secs_f64() * 1e3;

    let inner: Vec<f64> = sensors
        .iter()
        .zip(&velocities)
        .map(|(p, v)| match config.aux_source {
            AuxSource::FourthEntry => v.inner,
            AuxSource::FromCoordinates => p.coords.dot(&v.velocity),
        })
        .collect();
    let truth_q = match config.truth_rotation {
        RotationModel::Exact => rotation_matrix_exact(&pose.angles),
        RotationModel::SmallAngle => rotation_matrix_small(&pose.angles),
    };
    let q_est = resolve_q(&pose_est, Some(&truth_q), config)?;
    let started = Instant::now();
    let motion_est = motion_stage(&meas, conformation, &inner, &q_est, config, seeds.as_ref())?;
    timings.motion_ms = started.elapsed().as_secs_f64() * 1e3;

    Ok(MovingEstimate {
        sensors,
        velocities,
        pose: pose_est,
        motion: motion_est,
        timings,
    })
}
