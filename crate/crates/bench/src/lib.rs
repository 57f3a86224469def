//! Seeded inputs shared by the benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stackfold_core::BinaryLabelMatrix;

/// Scores with ties (two decimals) and labels at roughly `prevalence`.
pub fn scored_labels(n: usize, prevalence: f64, seed: u64) -> (Vec<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(prevalence))).collect();
    let scores = labels.iter().map(|&y| ((rng.random::<f64>() + 0.3 * f64::from(y)) * 100.0).round() / 100.0).collect();
    (scores, labels)
}

/// Independent labels with per-column prevalence between 5% and 30%.
pub fn label_matrix(n: usize, n_labels: usize, seed: u64) -> BinaryLabelMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prevalence: Vec<f64> = (0..n_labels).map(|_| rng.random_range(0.05..0.3)).collect();
    let values = Array2::from_shape_fn((n, n_labels), |(_, c)| u8::from(rng.random_bool(prevalence[c])));
    BinaryLabelMatrix::new(
        (0..n).map(|i| format!("s{i}")).collect(),
        (0..n_labels).map(|c| format!("l{c}")).collect(),
        values,
    )
    .expect("well-formed matrix")
}

/// Probability-like features whose first column drives the target.
pub fn boosting_data(n: usize, width: usize, seed: u64) -> (Array2<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_simple_fn((n, width), || rng.random::<f64>());
    let y = x.column(0).iter().map(|&v| u8::from(v + 0.3 * rng.random::<f64>() > 0.65)).collect();
    (x, y)
}
