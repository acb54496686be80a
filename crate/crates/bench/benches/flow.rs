use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use geoflow_bench::g3_fixture;
use geoflow_core::diagnostics::{criterion_scan, ScanConfig};
use geoflow_core::geodesics::integrate;
use geoflow_core::linearization::{green_bundle, propagate_jacobi, CurvatureSource, LinearizationConfig};
use geoflow_core::ode::{uniform_grid, IntegratorConfig};
use geoflow_core::DMatrix;

fn geodesic(c: &mut Criterion) {
    let (m, theta) = g3_fixture();
    let cfg = IntegratorConfig::default();
    let mut group = c.benchmark_group("geodesic");
    for t in [10.0, 100.0, 1000.0] {
        group.bench_with_input(BenchmarkId::from_parameter(t), &t, |b, &t| {
            b.iter(|| integrate(&m, black_box(&theta), t, &cfg).unwrap())
        });
    }
    group.finish();
}

fn jacobi(c: &mut Criterion) {
    let (m, theta) = g3_fixture();
    let cfg = LinearizationConfig::default();
    let source = CurvatureSource::geodesic(&m, theta);
    let times = uniform_grid(0.0, 20.0, 0.05);
    let y0 = DMatrix::identity(1, 1);
    let yp0 = DMatrix::zeros(1, 1);
    c.bench_function("jacobi t=20", |b| b.iter(|| propagate_jacobi(&source, &times, &y0, &yp0, &cfg).unwrap()));
}

fn bundles(c: &mut Criterion) {
    let (m, theta) = g3_fixture();
    let cfg = LinearizationConfig::default();
    c.bench_function("green bundle", |b| b.iter(|| green_bundle(&m, black_box(&theta), &cfg).unwrap()));
}

fn scan(c: &mut Criterion) {
    let (m, _) = g3_fixture();
    let cfg = ScanConfig { n_geodesics: 32, t_final: 60.0, ..ScanConfig::default() };
    let mut group = c.benchmark_group("scan");
    group.sample_size(10);
    group.bench_function("32 geodesics t=60", |b| b.iter(|| criterion_scan(&m, &cfg).unwrap()));
    group.finish();
}

criterion_group!(benches, geodesic, jacobi, bundles, scan);
criterion_main!(benches);
