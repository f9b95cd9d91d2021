use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use gradts_bench::{random_tensor, toy_model_and_batch};
use gradts_core::toymtl::ToyModelConfig;
use gradts_core::{correlation_matrix, normalize};

fn ranking(c: &mut Criterion) {
    let tensor = random_tensor("t", 12, 12, 3);
    c.bench_function("normalize_12x12", |b| b.iter(|| normalize(black_box(&tensor))));

    let matrices: Vec<_> = (0..8)
        .map(|i| normalize(&random_tensor(&format!("t{i}"), 12, 12, i)))
        .collect();
    c.bench_function("correlation_matrix_8_tasks", |b| {
        b.iter(|| correlation_matrix(black_box(&matrices)).unwrap())
    });
}

fn toy_model(c: &mut Criterion) {
    let config = ToyModelConfig::default();
    let (model, batch) = toy_model_and_batch(&config, 32, 4);
    let refs: Vec<_> = batch.iter().collect();
    c.bench_function("toy_forward_32", |b| {
        b.iter(|| model.batch_loss("bench", black_box(&refs)).unwrap())
    });
    c.bench_function("toy_forward_backward_32", |b| {
        b.iter(|| model.batch_loss_and_grad("bench", black_box(&refs)).unwrap())
    });
}

criterion_group!(benches, ranking, toy_model);
criterion_main!(benches);
