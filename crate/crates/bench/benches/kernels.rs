use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::{dmatrix, dvector};
use shuttle_core::{build_protocol, curvature_at, ground_state, propagate, BoundarySpec, RMatrixPath, RMode, TrajectoryPath};

/// Corner boundary data with `n` functions per degree of freedom and small fixed coefficients.
fn corner(n: usize) -> (TrajectoryPath, RMatrixPath, BoundarySpec) {
    let m0 = dmatrix![1.0, 0.0, 0.0; 0.0, 25.0, 0.0; 0.0, 0.0, 25.0];
    let mt = dmatrix![25.0, 0.0, 0.0; 0.0, 1.0, 0.0; 0.0, 0.0, 25.0];
    let mid = dvector![1.0, 1.0, 0.0];
    let spec = BoundarySpec::new(dvector![0.0, 1.0, 0.0], dvector![1.0, 0.0, 0.0], m0.clone(), mt.clone())
        .and_then(|s| s.with_midpoint(mid.clone()))
        .unwrap();
    let mut traj = TrajectoryPath::transport_via(&spec.c0, &spec.ct, &mid, n).unwrap();
    let mut rpath = RMatrixPath::new(&m0, &mt, RMode::Full, n).unwrap();
    let a: Vec<f64> = (0..traj.num_coefficients()).map(|i| 0.01 * (i as f64 * 0.7).sin()).collect();
    let b: Vec<f64> = (0..rpath.num_coefficients()).map(|i| 0.002 * (i as f64 * 1.3).cos()).collect();
    traj.set_coefficients(&a).unwrap();
    rpath.set_coefficients(&b).unwrap();
    (traj, rpath, spec)
}

fn bench_curvature(c: &mut Criterion) {
    let mut g = c.benchmark_group("curvature_at");
    for n in [3, 25] {
        let (_, rpath, _) = corner(n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &rpath, |b, r| {
            b.iter(|| curvature_at(r, black_box(0.37), 10.0).unwrap())
        });
    }
    g.finish();
}

fn bench_protocol(c: &mut Criterion) {
    let (traj, rpath, spec) = corner(5);
    c.bench_function("build_protocol/513", |b| {
        b.iter(|| build_protocol(&traj, &rpath, &spec, 10.0, black_box(513), 1.0).unwrap())
    });
}

fn bench_propagate(c: &mut Criterion) {
    let (traj, rpath, spec) = corner(5);
    let protocol = build_protocol(&traj, &rpath, &spec, 10.0, 2049, 1.0).unwrap();
    let start = ground_state(&spec.m0, &spec.c0, 1.0).unwrap();
    c.bench_function("propagate/2048", |b| b.iter(|| propagate(&start, &protocol, black_box(2048)).unwrap()));
}

criterion_group!(benches, bench_curvature, bench_protocol, bench_propagate);
criterion_main!(benches);
