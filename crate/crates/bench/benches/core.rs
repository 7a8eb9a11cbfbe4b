use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sums_core::ctmc::{self, Generator};
use sums_core::graphs::{expand, ProcessGraph};
use sums_core::gwishart::{self, GWishartParams};
use sums_core::nalgebra::DMatrix;
use sums_core::sampler::{ChainConfig, Sampler};
use sums_core::simulate::{gen_panel, sm4_design, SimScenario};

fn transition_matrices(c: &mut Criterion) {
    let q2 = Generator::new(&[0.12, 0.37], 2).unwrap();
    let q3 = Generator::new(&[0.12, 0.05, 0.37, 0.2, 0.1, 0.26], 3).unwrap();
    c.bench_function("transition/closed_form_2", |b| {
        b.iter(|| ctmc::transition_matrix(black_box(&q2), black_box(1.3)).unwrap())
    });
    c.bench_function("transition/pade_2", |b| {
        b.iter(|| ctmc::transition_matrix_pade(black_box(&q2), black_box(1.3)))
    });
    c.bench_function("transition/pade_3", |b| {
        b.iter(|| ctmc::transition_matrix(black_box(&q3), black_box(1.3)).unwrap())
    });
}

fn gwishart(c: &mut Criterion) {
    let design = sm4_design();
    // processes 1 and 2 joined, 3 on its own: a 4 + 2 block rate graph
    let g0 = ProcessGraph::from_edges(3, &[(0, 1)]).unwrap();
    let g = expand(&g0, &design);
    let params = GWishartParams::new(8.0, DMatrix::identity(6, 6) * 0.125, g).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    c.bench_function("gwishart/sample_direct_6", |b| {
        b.iter(|| gwishart::sample_direct(black_box(&params), &mut rng).unwrap())
    });
    let path = expand(&ProcessGraph::from_edges(3, &[(0, 1), (1, 2)]).unwrap(), &design);
    let path_params = params.with_graph(path);
    c.bench_function("gwishart/log_norm_const_decomposable_6", |b| {
        b.iter(|| gwishart::log_norm_const_decomposable(black_box(&path_params)).unwrap())
    });
    c.bench_function("gwishart/log_norm_const_mc_1000", |b| {
        b.iter(|| gwishart::log_norm_const_mc(black_box(&path_params), 1000, &mut rng).unwrap())
    });
}

fn sampler(c: &mut Criterion) {
    let sim = gen_panel(&SimScenario::sm4(1)).unwrap();
    let config = ChainConfig::default();
    let mut group = c.benchmark_group("sampler");
    group.sample_size(20);
    group.bench_function("iterate_sm4_200", |b| {
        b.iter_batched_ref(
            || Sampler::new(config.clone(), &sim.data, 0).unwrap(),
            |s| s.iterate().unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, transition_matrices, gwishart, sampler);
criterion_main!(benches);
