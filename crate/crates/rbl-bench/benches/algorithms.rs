//! Wall-time benchmarks of the four estimation stages at the default
//! M = N = 8 layout.

use criterion::{criterion_group, criterion_main, Criterion};
use rbl_core::geometry::{MotionParams, PoseParams, RotationAngles, RotationModel};
use rbl_core::harness::default_conformation;
use rbl_core::measurement::{simulate, NoiseModel};
use rbl_core::pipeline::{
    estimate_motion, estimate_pose, estimate_positions, estimate_velocities, PipelineConfig,
};
use std::hint::black_box;

fn bench_algorithms(c: &mut Criterion) {
    let conf = default_conformation();
    let pose = PoseParams::new(
        RotationAngles::from_degrees(3.0, -2.0, 4.0),
        nalgebra_vec(1.5, -2.0, 0.8),
    );
    let motion = MotionParams::new(
        nalgebra_vec(0.05, -0.03, 0.06),
        nalgebra_vec(1.0, 0.4, -0.7),
    );
    let noise = NoiseModel::coupled(0.1, 10.0, 7);
    let meas = simulate(&conf, &pose, Some(&motion), &noise, RotationModel::Exact).unwrap();
    let cfg = PipelineConfig::default();

    let positions = estimate_positions(&meas, &conf, &cfg).unwrap();
    let velocities = estimate_velocities(&meas, &conf, &cfg).unwrap();
    let pose_est = estimate_pose(&meas, &conf, &positions, &cfg).unwrap();

    c.bench_function("position_gabp", |b| {
        b.iter(|| black_box(estimate_positions(&meas, &conf, &cfg).unwrap()))
    });
    c.bench_function("velocity_gabp", |b| {
        b.iter(|| black_box(estimate_velocities(&meas, &conf, &cfg).unwrap()))
    });
    c.bench_function("pose_gabp", |b| {
        b.iter(|| black_box(estimate_pose(&meas, &conf, &positions, &cfg).unwrap()))
    });
    c.bench_function("motion_gabp", |b| {
        b.iter(|| {
            black_box(
                estimate_motion(&meas, &conf, &positions, &velocities, &pose_est, None, &cfg)
                    .unwrap(),
            )
        })
    });
}

fn nalgebra_vec(x: f64, y: f64, z: f64) -> nalgebra::Vector3<f64> {
    nalgebra::Vector3::new(x, y, z)
}

criterion_group!(benches, bench_algorithms);
criterion_main!(benches);
