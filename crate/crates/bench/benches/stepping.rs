use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use zakai_core::model::example1;
use zakai_core::oracle::{particle_filter, ParticleOptions};
use zakai_core::{
    build_space, derive_coefficients, run_filter, simulate_path, DensityState, FilterOptions, MuRule, SeedRecord,
    SplittingScheme,
};

fn model() -> zakai_core::ModelSpec {
    example1().with_initial(5.0, 0.5).with_horizon(0.25)
}

fn assembly(c: &mut Criterion) {
    let derived = derive_coefficients(&model()).unwrap();
    let mut g = c.benchmark_group("assemble");
    for n in [24, 48, 96] {
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| {
            b.iter(|| build_space(black_box(&derived), n, None).unwrap())
        });
    }
    g.finish();
}

fn split_step(c: &mut Criterion) {
    let derived = derive_coefficients(&model()).unwrap();
    let mu = MuRule::Coercive.resolve(&derived).unwrap();
    let mut g = c.benchmark_group("split_step");
    for n in [24, 48, 96] {
        let space = build_space(&derived, n, None).unwrap();
        let scheme = SplittingScheme::new(&space, 0.25 / 1024.0, mu).unwrap();
        let (state, _) = DensityState::gaussian(&space, 5.0, 0.5).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| scheme.split_step(black_box(&state.c), 0.01, 1))
        });
    }
    g.finish();
}

fn filter_run(c: &mut Criterion) {
    let m = model();
    let derived = derive_coefficients(&m).unwrap();
    let mu = MuRule::Coercive.resolve(&derived).unwrap();
    let space = build_space(&derived, 48, None).unwrap();
    let path = simulate_path(&m, 1024, SeedRecord::new(0, 0)).unwrap();
    let scheme = SplittingScheme::new(&space, path.kappa, mu).unwrap();
    let (p0, _) = DensityState::gaussian(&space, m.x0_mean, m.x0_var).unwrap();
    c.bench_function("run_filter/n48_N1024", |b| {
        b.iter(|| run_filter(&scheme, black_box(&path), &p0, FilterOptions::default()).unwrap())
    });

    let mut g = c.benchmark_group("particle_filter");
    g.sample_size(10);
    g.bench_function("P2000_N1024", |b| {
        let opts = ParticleOptions {
            n_particles: 2000,
            ..ParticleOptions::default()
        };
        b.iter(|| particle_filter(&derived, black_box(&path), opts, SeedRecord::new(0, 0)).unwrap())
    });
    g.finish();
}

criterion_group!(benches, assembly, split_step, filter_run);
criterion_main!(benches);
