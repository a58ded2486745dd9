use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::array::DenseArray;

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_fan_in<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, shape: &[usize]) -> DenseArray {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    DenseArray::new(shape.to_vec(), values).expect("shape matches")
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R, std: f64, shape: &[usize]) -> DenseArray {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let values = (0..n).map(|_| dist.sample(rng)).collect();
    DenseArray::new(shape.to_vec(), values).expect("shape matches")
}
