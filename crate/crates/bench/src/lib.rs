//! Shared fixtures for the benchmarks.

use gradts_core::toymtl::{Instance, Label, Model, ToyModelConfig};
use gradts_core::{HeadGradientTensor, HeadGrid, Objective};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` reals drawn from a small pool so that ties occur.
pub fn tied_scores(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..n.max(4) / 4) as f64).collect()
}

/// Kendall pair counts by enumerating all pairs; reference for the merge sort.
pub fn brute_tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
    let (mut conc, mut disc, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let dx = x[i].partial_cmp(&x[j]).expect("finite");
            let dy = y[i].partial_cmp(&y[j]).expect("finite");
            use std::cmp::Ordering::Equal;
            match (dx, dy) {
                (Equal, Equal) => {
                    tx += 1;
                    ty += 1;
                }
                (Equal, _) => tx += 1,
                (_, Equal) => ty += 1,
                (a, b) if a == b => conc += 1,
                _ => disc += 1,
            }
        }
    }
    let pairs = (x.len() * x.len().saturating_sub(1) / 2) as f64;
    let denom = ((pairs - tx as f64) * (pairs - ty as f64)).sqrt();
    (denom > 0.0).then(|| (conc - disc) as f64 / denom)
}

pub fn random_tensor(task_id: &str, layers: usize, heads: usize, seed: u64) -> HeadGradientTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..layers * heads).map(|_| rng.random::<f64>()).collect();
    HeadGradientTensor::task(
        task_id,
        HeadGrid::from_vec(layers, heads, values).expect("positive dims"),
    )
}

/// A head-bearing toy model and a fixed batch of classification instances.
pub fn toy_model_and_batch(config: &ToyModelConfig, batch: usize, seed: u64) -> (Model, Vec<Instance>) {
    let model = Model::new(config, &[("bench".to_owned(), Objective::Classification, 3)]).expect("valid config");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances = (0..batch)
        .map(|i| {
            let len = rng.random_range(2..=config.max_len);
            Instance {
                id: format!("b{i}"),
                tokens: (0..len)
                    .map(|_| rng.random_range(0..config.vocab_size as u32))
                    .collect(),
                label: Label::Class(rng.random_range(0..3)),
            }
        })
        .collect();
    (model, instances)
}
