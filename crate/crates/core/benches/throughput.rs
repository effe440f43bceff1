//! Parallel vs sequential throughput of the data-parallel stages.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kvqa_core::par;
use kvqa_core::pipeline::{analysis_records, evaluate, generate_synthetic, train, SynthConfig, TrainSettings};
use kvqa_core::similarity::ReferenceMode;

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", true), ("sequential", false)]
}

fn throughput(c: &mut Criterion) {
    let data = generate_synthetic(&SynthConfig {
        n: 400,
        ..SynthConfig::default()
    })
    .expect("synthetic data");
    let res = data.resources().expect("resources");
    let mut settings = TrainSettings::default();
    settings.optimizer.epochs = 1;
    let model = train(&data.dataset, &res, &settings).expect("training").model;

    let mut group = c.benchmark_group("stages");
    group.sample_size(10);
    for (name, parallel) in modes() {
        par::set_parallel(parallel);
        group.bench_function(BenchmarkId::new("evaluate", name), |b| {
            b.iter(|| black_box(evaluate(&data.dataset, &model, &res).unwrap()))
        });
        group.bench_function(BenchmarkId::new("analysis", name), |b| {
            b.iter(|| {
                black_box(analysis_records(
                    &data.dataset,
                    &res.provider,
                    ReferenceMode::Mean,
                    None,
                ))
            })
        });
        group.bench_function(BenchmarkId::new("train_epoch", name), |b| {
            b.iter(|| black_box(train(&data.dataset, &res, &settings).unwrap()))
        });
    }
    par::set_parallel(true);
    group.finish();
}

criterion_group!(benches, throughput);
criterion_main!(benches);
