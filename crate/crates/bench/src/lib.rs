//! Seeded inputs for the benchmarks.

use match_core::encoders::EmbeddingOutput;
use match_core::rng::substream;
use ndarray::Array2;
use rand::Rng;

pub fn embedding(len: usize, dim: usize, seed: u64) -> EmbeddingOutput {
    let mut rng = substream(seed, "bench.embedding", 0);
    let vectors = Array2::from_shape_simple_fn((len, dim), || rng.random_range(-1.0..1.0));
    let tokens = (0..len).map(|i| format!("t{i}")).collect();
    EmbeddingOutput::from_rows(tokens, vectors).expect("finite rows")
}

/// Scores and tie-heavy labels of length `n`.
pub fn series(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = substream(seed, "bench.series", 0);
    let x = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
    (x, y)
}

pub const SNIPPET: &str = "def moving_average(xs, k):\n    out = []\n    for i in range(len(xs) - k + 1):\n        out.append(sum(xs[i:i + k]) / k)\n    return out\n";
pub const REFERENCE: &str = "def moving_average(values, window):\n    return [sum(values[i:i + window]) / window for i in range(len(values) - window + 1)]\n";
