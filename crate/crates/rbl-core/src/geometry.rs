//! Rigid-body kinematics: rotation matrices, the skew (cross-product)
//! operator, their small-angle vectorized forms, and the forward
//! transform/velocity maps.
//!
//! Angles are radians everywhere; degree conversion happens only at the
//! configuration boundary. Vectorization is column-major throughout, so the
//! identity `vec(X Y Z) = (Zᵀ ⊗ X) vec(Y)` holds with nalgebra's native
//! storage order.

use nalgebra::{DMatrix, Matrix3, SMatrix, SVector, Vector3};
use thiserror::Error;

/// 3x3 rotation matrix. Exact rotations are members of SO(3); the
/// small-angle form returned by [`rotation_matrix_small`] is not.
pub type RotationMatrix = Matrix3<f64>;

/// Error raised by conformation validation.
#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("a rigid body needs at least one sensor")]
    NoSensors,
    #[error("position estimation needs at least 5 anchors, got {0}")]
    TooFewAnchors(usize),
    #[error(
        "anchor layout is degenerate (coplanar anchors); the range system matrix is rank deficient"
    )]
    DegenerateAnchors,
    #[error("coordinate matrices must have 3 rows, got {0}")]
    BadRowCount(usize),
}

/// Roll, pitch and yaw rotation angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RotationAngles {
    /// Rotation about the x-axis (roll), radians.
    pub roll: f64,
    /// Rotation about the y-axis (pitch), radians.
    pub pitch: f64,
    /// Rotation about the z-axis (yaw), radians.
    pub yaw: f64,
}

impl RotationAngles {
    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self { roll, pitch, yaw }
    }

    pub fn from_degrees(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self::new(roll.to_radians(), pitch.to_radians(), yaw.to_radians())
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    /// Angles as the vector θ = [θx, θy, θz]ᵀ.
    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.roll, self.pitch, self.yaw)
    }
}

/// Pose of the rigid body: rotation angles plus translation (meters).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseParams {
    pub angles: RotationAngles,
    pub translation: Vector3<f64>,
}

impl PoseParams {
    pub fn new(angles: RotationAngles, translation: Vector3<f64>) -> Self {
        Self {
            angles,
            translation,
        }
    }
}

/// Motion of the rigid body: angular velocity (rad/s) plus translational
/// velocity (m/s).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MotionParams {
    pub angular_velocity: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

impl MotionParams {
    pub fn new(angular_velocity: Vector3<f64>, velocity: Vector3<f64>) -> Self {
        Self {
            angular_velocity,
            velocity,
        }
    }
}

/// Which rotation model places the sensors: the exact trigonometric matrix
/// or its first-order small-angle form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RotationModel {
    #[default]
    Exact,
    SmallAngle,
}

/// Body-frame sensor coordinates (3xN) and global anchor coordinates (3xM),
/// both in meters.
///
/// Construction validates the layout the estimators rely on: at least one
/// sensor, at least five anchors (the range system has four unknowns and the
/// leave-one-out sums need one redundant row), and anchors spanning 3D so
/// the system matrix has full column rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Conformation {
    body: DMatrix<f64>,
    anchors: DMatrix<f64>,
}

impl Conformation {
    pub fn new(body: DMatrix<f64>, anchors: DMatrix<f64>) -> Result<Self, GeometryError> {
        if body.nrows() != 3 {
            return Err(GeometryError::BadRowCount(body.nrows()));
        }
        if anchors.nrows() != 3 {
            return Err(GeometryError::BadRowCount(anchors.nrows()));
        }
        if body.ncols() == 0 {
            return Err(GeometryError::NoSensors);
        }
        if anchors.ncols() < 5 {
            return Err(GeometryError::TooFewAnchors(anchors.ncols()));
        }
        // Full column rank of the M x 4 range system matrix [-2 a_m', 1]
        // is equivalent to the anchors not being coplanar.
        let m = anchors.ncols();
        let mut g = DMatrix::zeros(m, 4);
        for row in 0..m {
            let a = anchors.column(row);
            g[(row, 0)] = -2.0 * a[0];
            g[(row, 1)] = -2.0 * a[1];
            g[(row, 2)] = -2.0 * a[2];
            g[(row, 3)] = 1.0;
        }
        let svd = g.svd(false, false);
        let s_max = svd.singular_values.max();
        let s_min = svd.singular_values.min();
        if s_min <= 1e-9 * s_max {
            return Err(GeometryError::DegenerateAnchors);
        }
        Ok(Self { body, anchors })
    }

    /// Number of body sensors N.
    pub fn num_sensors(&self) -> usize {
        self.body.ncols()
    }

    /// Number of anchors M.
    pub fn num_anchors(&self) -> usize {
        self.anchors.ncols()
    }

    /// Body-frame coordinates of the n-th sensor.
    pub fn sensor(&self, n: usize) -> Vector3<f64> {
        Vector3::from(self.body.fixed_view::<3, 1>(0, n))
    }

    /// Global coordinates of the m-th anchor.
    pub fn anchor(&self, m: usize) -> Vector3<f64> {
        Vector3::from(self.anchors.fixed_view::<3, 1>(0, m))
    }

    pub fn body(&self) -> &DMatrix<f64> {
        &self.body
    }

    pub fn anchors(&self) -> &DMatrix<f64> {
        &self.anchors
    }
}

/// Exact rotation matrix Q = Qz(yaw) * Qy(pitch) * Qx(roll).
pub fn rotation_matrix_exact(angles: &RotationAngles) -> RotationMatrix {
    let (sx, cx) = angles.roll.sin_cos();
    let (sy, cy) = angles.pitch.sin_cos();
    let (sz, cz) = angles.yaw.sin_cos();
    let qz = Matrix3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0);
    let qy = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let qx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
    qz * qy * qx
}

/// First-order small-angle rotation matrix, Q ≈ I + `[θ]ₓ`.
///
/// This is the linearization of [`rotation_matrix_exact`] at θ = 0 (cos θ ≈ 1,
/// sin θ ≈ θ); the entrywise error is O(max|θ|²), so the model is useful for
/// rotations up to roughly twenty degrees.
pub fn rotation_matrix_small(angles: &RotationAngles) -> RotationMatrix {
    Matrix3::identity() + skew(&angles.as_vector())
}

/// Skew-symmetric cross-product matrix `[ω]ₓ` with `[ω]ₓ v = ω × v`.
pub fn skew(omega: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -omega.z, omega.y, //
        omega.z, 0.0, -omega.x, //
        -omega.y, omega.x, 0.0,
    )
}

/// Constant basis of the vectorized small-angle rotation:
/// vec(Q_small(θ)) = γ + L θ (column-major), with γ = vec(I).
///
/// L has exactly six nonzero entries, all ±1.
pub fn vec_rotation_basis() -> (SVector<f64, 9>, SMatrix<f64, 9, 3>) {
    let gamma = SVector::<f64, 9>::from_column_slice(&[
        1.0, 0.0, 0.0, //
        0.0, 1.0, 0.0, //
        0.0, 0.0, 1.0,
    ]);
    (gamma, vec_skew_basis())
}

/// Constant basis of the vectorized skew operator:
/// vec(`[ω]ₓ`) = Φ ω (column-major).
///
/// Φ has exactly six nonzero entries, all ±1.
pub fn vec_skew_basis() -> SMatrix<f64, 9, 3> {
    // Rows follow column-major order of the 3x3 skew matrix:
    // [0, w3, -w2, -w3, 0, w1, w2, -w1, 0].
    SMatrix::<f64, 9, 3>::from_row_slice(&[
        0.0, 0.0, 0.0, //
        0.0, 0.0, 1.0, //
        0.0, -1.0, 0.0, //
        0.0, 0.0, -1.0, //
        0.0, 0.0, 0.0, //
        1.0, 0.0, 0.0, //
        0.0, 1.0, 0.0, //
        -1.0, 0.0, 0.0, //
        0.0, 0.0, 0.0,
    ])
}

/// Transformed coordinates of a sensor: s = Q c + t.
pub fn transform_sensor(
    pose: &PoseParams,
    body_coords: &Vector3<f64>,
    model: RotationModel,
) -> Vector3<f64> {
    rotation_for(pose, model) * body_coords + pose.translation
}

/// Velocity of a sensor on the moving body: ṡ = `[ω]ₓ Q c + ṫ`.
pub fn sensor_velocity(
    pose: &PoseParams,
    motion: &MotionParams,
    body_coords: &Vector3<f64>,
    model: RotationModel,
) -> Vector3<f64> {
    skew(&motion.angular_velocity) * rotation_for(pose, model) * body_coords + motion.velocity
}

fn rotation_for(pose: &PoseParams, model: RotationModel) -> RotationMatrix {
    match model {
        RotationModel::Exact => rotation_matrix_exact(&pose.angles),
        RotationModel::SmallAngle => rotation_matrix_small(&pose.angles),
    }
}
