//! Data-parallel core against a single worker thread.
//!
//! `cargo bench -p etch-core` compares a one-thread pool with the default
//! pool; `cargo bench -p etch-core --no-default-features` measures the
//! sequential fallback, where both pools run the same serial loops.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use etch_core::dataset::{generate, DatasetSpec, Record};
use etch_core::model::{Model, ModelConfig, Variant};
use etch_core::oracle::OracleConfig;
use etch_core::training::{loss_and_gradient, mean_nll};
use rayon::ThreadPoolBuilder;

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let default = ThreadPoolBuilder::new().build().expect("default pool");
    let label = if cfg!(feature = "parallel") { "rayon" } else { "sequential" };
    vec![
        (format!("{label}/1-thread"), ThreadPoolBuilder::new().num_threads(1).build().expect("pool")),
        (format!("{label}/{}-thread", default.current_num_threads()), default),
    ]
}

fn bench(c: &mut Criterion) {
    let spec = DatasetSpec { n_train: 64, n_val: 64, n_test: 1, ..Default::default() };
    let oracle = OracleConfig::default();
    let data = generate(&spec, &oracle).expect("dataset");
    let batch: Vec<&Record> = data.train.iter().take(32).collect();

    let mut group = c.benchmark_group("batch_gradient");
    group.sample_size(10);
    for v in [Variant::Baseline, Variant::Weibull] {
        let model = Model::init(ModelConfig::with_variant(v), 0).expect("model");
        for (name, pool) in pools() {
            group.bench_with_input(BenchmarkId::new(v.name(), &name), &model, |b, m| {
                b.iter(|| pool.install(|| loss_and_gradient(m, &batch, 8).expect("gradient")))
            });
        }
    }
    group.finish();

    let mut group = c.benchmark_group("evaluation");
    group.sample_size(10);
    let model = Model::init(ModelConfig::with_variant(Variant::Weibull), 0).expect("model");
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new("val_nll", &name), |b| {
            b.iter(|| pool.install(|| mean_nll(&model, &data.val).expect("nll")))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("dataset");
    group.sample_size(10);
    let spec = DatasetSpec { n_train: 256, n_val: 32, n_test: 32, ..Default::default() };
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new("generate", &name), |b| {
            b.iter(|| pool.install(|| generate(&spec, &oracle).expect("dataset")))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
