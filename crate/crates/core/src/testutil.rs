//! Finite-difference oracles shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ndcore::Array;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Array {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Array::new(shape.to_vec(), data).unwrap()
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_diff(f: &mut dyn FnMut(&Array) -> f64, x: &Array, i: usize, h: f64) -> f64 {
    let mut xp = x.clone();
    xp.data_mut()[i] += h;
    let mut xm = x.clone();
    xm.data_mut()[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Relative error with an absolute floor for gradients that are numerically zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff < 1e-9 {
        return 0.0;
    }
    diff / a.abs().max(b.abs())
}

/// Checks `grad` against central differences of `f` on every coordinate.
pub fn assert_grad_matches(f: &mut dyn FnMut(&Array) -> f64, x: &Array, grad: &Array, tol: f64) {
    assert_eq!(x.shape(), grad.shape());
    for i in 0..x.len() {
        let fd = central_diff(f, x, i, 1e-3);
        let e = rel_err(grad.data()[i], fd);
        assert!(e < tol, "coord {i}: tape {} vs fd {fd} (rel {e})", grad.data()[i]);
    }
}
