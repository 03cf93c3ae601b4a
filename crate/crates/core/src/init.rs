use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::Result;
use crate::real::Real;

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_uniform<T: Real, R: Rng>(
    rng: &mut R,
    shape: &[usize],
    fan_in: usize,
) -> Result<Tensor<T>> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data)
}

pub fn uniform<T: Real, R: Rng>(
    rng: &mut R,
    shape: &[usize],
    lo: f64,
    hi: f64,
) -> Result<Tensor<T>> {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| T::lit(rng.gen_range(lo..hi))).collect(),
    )
}
