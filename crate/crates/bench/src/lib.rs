//! Deterministic inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use redimnet_core::metrics::ScoreSet;
use redimnet_core::Tensor;

/// Uniform noise at 16 kHz, scaled to a speech-like level.
pub fn noise_wave(seconds: f64, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * 16_000.0).round() as usize;
    (0..n).map(|_| rng.random_range(-0.1f32..0.1)).collect()
}

/// Uniform tensor in [-1, 1).
pub fn uniform(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect(), shape).expect("shape matches data")
}

/// `n` trials, one in ten a target, targets shifted up by one.
pub fn score_set(n: usize, seed: u64) -> ScoreSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<bool> = (0..n).map(|i| i % 10 == 0).collect();
    let scores = labels.iter().map(|&t| rng.random_range(-1.0..1.0) + if t { 1.0 } else { 0.0 }).collect();
    ScoreSet::new(labels, scores).expect("labels and scores have equal length")
}
