use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use otseg_core::ot::uniform_marginal;
use otseg_core::synthetic::{generate_pair, SyntheticSpec};
use otseg_core::{
    compute_cost_matrix, otce_sampled, sinkhorn, Execution, Preprocess, SamplingConfig,
    SinkhornConfig,
};

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn pair(pixels: usize) -> (otseg_core::PixelSet, otseg_core::PixelSet) {
    let spec = SyntheticSpec {
        pixels,
        label_noise: 0.3,
        seed: 1,
        ..Default::default()
    };
    let (s, t, _) = generate_pair(&spec).unwrap();
    (s, t)
}

fn cost(c: &mut Criterion) {
    let (s, t) = pair(2000);
    let mut group = c.benchmark_group("cost_matrix_2000");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                compute_cost_matrix(black_box(s.features.view()), t.features.view(), exec).unwrap()
            })
        });
    }
    group.finish();
}

fn solve(c: &mut Criterion) {
    let (s, t) = pair(1000);
    let cost =
        compute_cost_matrix(s.features.view(), t.features.view(), Execution::Sequential).unwrap();
    let u = uniform_marginal(1000);
    let mut group = c.benchmark_group("sinkhorn_1000");
    group
        .sample_size(10)
        .measurement_time(Duration::from_secs(10));
    for (name, execution) in MODES {
        let config = SinkhornConfig {
            execution,
            ..SinkhornConfig::default()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| sinkhorn(black_box(&cost), u.view(), u.view(), &config).unwrap())
        });
    }
    group.finish();
}

fn sampled(c: &mut Criterion) {
    let (s, t) = pair(5000);
    let mut group = c.benchmark_group("otce_sampled_500x4");
    group
        .sample_size(10)
        .measurement_time(Duration::from_secs(10));
    for (name, execution) in MODES {
        let sampling = SamplingConfig {
            pixels_per_sample: 500,
            repetitions: 4,
            execution,
            ..SamplingConfig::default()
        };
        let solver = SinkhornConfig {
            execution,
            ..SinkhornConfig::default()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                otce_sampled(black_box(&s), &t, &sampling, &solver, Preprocess::default()).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, cost, solve, sampled);
criterion_main!(benches);
