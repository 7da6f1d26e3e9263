//! Parameter initialization. Kaiming-uniform style bounds from fan-in, all
//! sampling through a caller-supplied seeded RNG so runs are reproducible.

use rand::Rng;

use crate::tensor::{Elem, Tensor};

fn uniform<E: Elem>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| E::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::param(shape, data).expect("consistent shape")
}

/// Conv kernel [out, in, k, k] with U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn conv_weight<E: Elem>(out_c: usize, in_c: usize, k: usize, rng: &mut impl Rng) -> Tensor<E> {
    let bound = 1.0 / ((in_c * k * k) as f64).sqrt();
    uniform(&[out_c, in_c, k, k], bound, rng)
}

pub fn conv_bias<E: Elem>(out_c: usize, in_c: usize, k: usize, rng: &mut impl Rng) -> Tensor<E> {
    let bound = 1.0 / ((in_c * k * k) as f64).sqrt();
    uniform(&[out_c], bound, rng)
}

pub fn zeros_param<E: Elem>(shape: &[usize]) -> Tensor<E> {
    let n: usize = shape.iter().product();
    Tensor::param(shape, vec![E::ZERO; n]).expect("consistent shape")
}

pub fn ones_param<E: Elem>(shape: &[usize]) -> Tensor<E> {
    let n: usize = shape.iter().product();
    Tensor::param(shape, vec![E::ONE; n]).expect("consistent shape")
}
