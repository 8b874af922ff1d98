#![allow(dead_code)]

use cba_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Central finite difference of `f` at flat coordinate `i` of `x`.
pub fn central_difference(f: &mut dyn FnMut(&Tensor) -> f64, x: &Tensor, i: usize, eps: f64) -> f64 {
    let mut plus = x.clone();
    plus.data_mut()[i] += eps;
    let mut minus = x.clone();
    minus.data_mut()[i] -= eps;
    (f(&plus) - f(&minus)) / (2.0 * eps)
}

/// Relative error with an absolute floor: values closer than `floor` count as equal.
pub fn grad_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= floor {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// Maximum gradient error over the listed coordinates.
pub fn max_grad_error(
    f: &mut dyn FnMut(&Tensor) -> f64,
    x: &Tensor,
    analytic: &[f64],
    coords: &[usize],
) -> f64 {
    coords
        .iter()
        .map(|&i| grad_error(analytic[i], central_difference(f, x, i, 1e-4), 1e-6))
        .fold(0.0, f64::max)
}
