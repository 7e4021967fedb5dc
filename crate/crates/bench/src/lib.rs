//! Input generators shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `k` block scores with a small positive drift.
pub fn block_scores(k: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k).map(|_| rng.random_range(-0.1..0.12)).collect()
}

/// A rank-one-plus-noise matrix shaped like a reference profile matrix.
pub fn profile_matrix(rows: usize, cols: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let loading: Vec<f64> = (0..cols).map(|_| rng.random_range(0.1..1.0)).collect();
    (0..rows)
        .map(|_| {
            let u: f64 = rng.random_range(-1.0..1.0);
            loading.iter().map(|v| u * v + rng.random_range(-0.01..0.01)).collect()
        })
        .collect()
}
