use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use rossviab_core::*;

fn bench_flow_map(c: &mut Criterion) {
    let state = State::new(0.3, 0.000005).unwrap();
    let control = Control::new(0.0333).unwrap();
    let rates = AggregateRates::new(0.076608, 0.0722633).unwrap();
    c.bench_function("flow_map_phi_100_substeps", |b| {
        b.iter(|| flow_map_phi(black_box(&state), control, &rates, 0.1, 100).unwrap())
    });
}

fn bench_membership(c: &mut Criterion) {
    let sg = StateGrid::new(70, 70, 1e-5).unwrap();
    let vg = ValueGrid::filled(&sg, 0, true);
    let p = State::new(0.371, 4.1e-6).unwrap();
    c.bench_function("conservative_membership", |b| {
        b.iter(|| conservative_membership(black_box(&p), &vg, &sg))
    });
}

fn bench_backward_sweep(c: &mut Criterion) {
    let sg = StateGrid::new(20, 20, 0.3).unwrap();
    let cg = ControlGrid::new(5, 0.05, 0.5).unwrap();
    let us = UncertaintySet::new(0.0, 0.3, 0.0, 0.35, 5, 5).unwrap();
    let hz = Horizon::new(0, 10).unwrap();
    let mut group = c.benchmark_group("backward_sweep_20x20_T10");
    group.sample_size(20);
    group.bench_function("full", |b| {
        b.iter(|| backward_sweep(&sg, &cg, &us, hz, Mode::Full, 0.1, black_box(50)).unwrap())
    });
    group.bench_function("corners", |b| {
        b.iter(|| backward_sweep(&sg, &cg, &us, hz, Mode::Corners, 0.1, black_box(50)).unwrap())
    });
    group.finish();
}

fn bench_reference_scale_kernel(c: &mut Criterion) {
    let sg = StateGrid::new(70, 70, 1e-5).unwrap();
    let cg = ControlGrid::new(70, 0.0333, 0.05).unwrap();
    let us = UncertaintySet::new(0.0, 5.0, 0.0, 25.0, 70, 70).unwrap();
    let hz = Horizon::new(0, 60).unwrap();
    let mut group = c.benchmark_group("reference_scale");
    group.sample_size(10);
    group.bench_function("middle_corners_70x70_T60", |b| {
        b.iter(|| backward_sweep(&sg, &cg, &us, hz, Mode::Corners, 0.1, black_box(100)).unwrap())
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_flow_map,
    bench_membership,
    bench_backward_sweep,
    bench_reference_scale_kernel
);
criterion_main!(benches);
