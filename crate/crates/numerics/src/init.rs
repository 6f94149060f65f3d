//! Parameter initializers.

use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Normal draws with standard deviation `std`, resampled outside `±2·std`.
pub fn trunc_normal<T: Real>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.trunc_normal(std)))
}

/// He-style scale for a fan-in, used by the convolutional stacks.
pub fn fan_in_normal<T: Real>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let std = (1.0 / fan_in.max(1) as f64).sqrt();
    trunc_normal(shape, std, rng)
}

pub fn zeros<T: Real>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape)
}

pub fn ones<T: Real>(shape: &[usize]) -> Tensor<T> {
    Tensor::full(shape, T::one())
}
