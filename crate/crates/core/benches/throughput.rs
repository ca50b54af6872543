//! Parallel vs single-threaded throughput of the data-parallel stages.
//!
//! `cargo bench -p respmotion` compares rayon's default pool with a
//! one-thread pool; `--no-default-features` benchmarks the sequential
//! fallback build.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use respmotion::evaluation::{evaluate, EvalConfig, Method, Predictor};
use respmotion::network::{ModelConfig, ModelParams};
use respmotion::phantom::{make_cohort, PhantomConfig, Sequence};
use respmotion::quantizer::build_codebook;
use respmotion::training::{train, TrainConfig};

fn cohort() -> Vec<Sequence> {
    let cfg = PhantomConfig {
        frames: 20,
        sequences_per_subject: 2,
        ..PhantomConfig::default()
    };
    make_cohort(&cfg, 2, 1)
        .unwrap()
        .into_iter()
        .flat_map(|s| s.sequences)
        .collect()
}

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let default = rayon::ThreadPoolBuilder::new().build().unwrap();
    let label = if cfg!(feature = "parallel") {
        format!("pool-{}", default.current_num_threads())
    } else {
        "sequential".to_string()
    };
    vec![
        (label, default),
        ("pool-1".to_string(), rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
    ]
}

fn bench_evaluation(c: &mut Criterion) {
    let seqs = cohort();
    let fields: Vec<_> = seqs[..2].iter().flat_map(|s| s.fields.iter().cloned()).collect();
    let cb = build_codebook(&fields, 5).unwrap();
    let test: Vec<&Sequence> = seqs[2..].iter().collect();
    let methods = [
        (Method::Oracle, Predictor::Oracle),
        (Method::QuantizedOracle, Predictor::QuantizedOracle(&cb)),
    ];
    let cfg = EvalConfig::default();
    let mut group = c.benchmark_group("evaluate_oracles");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(|| evaluate(&methods, &test, 5, &cfg, "bench").unwrap()))
        });
    }
    group.finish();
}

fn bench_training(c: &mut Criterion) {
    let seqs = cohort();
    let cb = build_codebook(&seqs[0].fields, 5).unwrap();
    let model = ModelConfig {
        base_channels: 8,
        lstm_hidden: 16,
        decoder_channels: 8,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        max_epochs: 1,
        accumulation: 4,
        windows_per_epoch: Some(8),
        val_stride: 8,
        ..TrainConfig::default()
    };
    let init = ModelParams::init(&model, 0).unwrap();
    let train_set: Vec<&Sequence> = seqs[..2].iter().collect();
    let val_set: Vec<&Sequence> = seqs[2..3].iter().collect();
    let mut group = c.benchmark_group("train_epoch_accumulate_4");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(|| train(&train_set, &val_set, &cb, &model, &cfg, init.clone()).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_evaluation, bench_training);
criterion_main!(benches);
