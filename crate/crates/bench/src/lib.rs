//! Seeded inputs shared by the benches.
use dds_core::difficulty::{Aggregation, DifficultyVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn points(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..dim).map(|_| r.random_range(-1.0..1.0)).collect()).collect()
}

pub fn vectors(n: usize, seed: u64) -> Vec<DifficultyVector> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| DifficultyVector {
            d1: r.random_range(1.0..100.0),
            d2: r.random_range(1.0..100.0),
            d3: r.random_range(1.0..100.0),
            atten_d2: None,
            atten_d3: None,
            aggregation: Aggregation::None,
            generated_response: String::new(),
        })
        .collect()
}

pub fn logprobs(n: usize, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| -r.random_range(0.0..10.0)).collect()
}

/// Strictly lower-triangular block with random weights.
pub fn attention_rows(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|j| (0..j).map(|_| r.random_range(0.0..1.0)).collect()).collect()
}
