//! Finite-difference reference gradients.
//!
//! These helpers only evaluate the forward function, so they stay independent
//! of every backward rule they are used to check.

use crate::Tensor;

/// Central-difference gradient of a scalar function at `at`.
pub fn central_difference(f: impl Fn(&Tensor) -> f64, at: &Tensor, step: f64) -> Tensor {
    let mut probe = at.clone();
    let mut grad = Tensor::zeros(at.shape().to_vec());
    for i in 0..at.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)` in the L2 norm.
///
/// Two all-zero gradients compare as exactly equal.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.zip_map(b, |x, y| x - y).norm_l2();
    let scale = a.norm_l2().max(b.norm_l2());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
