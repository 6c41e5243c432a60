use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use qproj_core::bangbang::bangbangify;
use qproj_core::lie::{build_mn, generated_algebra, default_depth_cap, DEFAULT_RANK_TOL};
use qproj_core::model::Params;
use qproj_core::sim::{interaction_propagator_at, propagator_matrix, Semantics, DEFAULT_STEP_TOL};
use qproj_core::{builtin_family, PiecewiseConstantControl, Segment, ValueRange};

fn random_bang(rng: &mut ChaCha8Rng, m: usize) -> PiecewiseConstantControl {
    let segments = (0..m).map(|j| Segment::new(rng.random_range(0.01..1.0), (j % 2) as f64)).collect();
    PiecewiseConstantControl::new(segments, ValueRange::TwoValue { a: 1.0 }).unwrap()
}

fn kernels(c: &mut Criterion) {
    let system = builtin_family("box_tridiagonal", &Params::new()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let bang = random_bang(&mut rng, 50);
    c.bench_function("propagator_50_segments_cutoff_20", |b| {
        b.iter(|| propagator_matrix(&system, black_box(&bang), 20, Semantics::TwoValue).unwrap())
    });

    let smooth = PiecewiseConstantControl::from_segments(
        (0..200).map(|_| Segment::new(0.005, rng.random_range(0.0..0.3))).collect(),
    )
    .unwrap();
    c.bench_function("bangbangify_200_segments_k_1000", |b| b.iter(|| bangbangify(black_box(&smooth), 1.0, 1000).unwrap()));

    let u = PiecewiseConstantControl::constant(0.3, 1.0).unwrap();
    let times: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    c.bench_function("interaction_propagator_n6", |b| {
        b.iter(|| interaction_propagator_at(&system, black_box(&u), 6, 0.0, &times, DEFAULT_STEP_TOL).unwrap())
    });

    let gens = build_mn(&system, 5).unwrap();
    c.bench_function("lie_closure_m5", |b| {
        b.iter(|| generated_algebra(black_box(&gens.matrices), default_depth_cap(5), DEFAULT_RANK_TOL).unwrap())
    });
}

criterion_group!(benches, kernels);
criterion_main!(benches);
