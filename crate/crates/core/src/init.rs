//! Parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::{c, Real};
use crate::tensor::Tensor;

/// Normal(0, std²) truncated to ±2·std by resampling.
pub fn trunc_normal<T: Real, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break c(z * std);
        }
    })
}

/// He-normal with fan-out `out_channels·k·k` for a conv weight `[out, in, k, k]`.
pub fn he_fan_out<T: Real, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let fan_out = (shape[0] * shape[2..].iter().product::<usize>()) as f64;
    let std = (2.0 / fan_out).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        c(z * std)
    })
}

pub fn normal<T: Real, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        c(z * std)
    })
}
