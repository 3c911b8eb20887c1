//! Parameter initializers.

use numcore::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Glorot-uniform `rows x cols` matrix.
pub fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-a..a)).collect())
}

pub fn normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}
