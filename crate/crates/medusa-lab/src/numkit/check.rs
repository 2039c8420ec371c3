//! Finite-difference oracles and error measures.
//!
//! These live in the library so the `verify` suites can exercise them, but
//! they are never part of an attack path — they exist to check the analytic
//! gradients, not to compute them.

use crate::error::{Error, Result};
use crate::numkit::tensor::Tensor;

/// Central finite-difference gradient of a scalar function.
pub fn fd_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::contract(format!("fd step must be positive, got {h}")));
    }
    let mut grad = Tensor::zeros_like(x);
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    grad.validate_finite("fd_gradient")?;
    Ok(grad)
}

/// Max absolute deviation relative to the oracle's largest coordinate.
///
/// A per-coordinate relative error blows up on coordinates that are
/// incidentally near zero, so errors are normalized by the oracle's ∞-norm
/// (floored at 1e-12 for all-zero oracles).
pub fn max_rel_error(analytic: &Tensor, oracle: &Tensor) -> Result<f64> {
    if !analytic.same_shape(oracle) {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", oracle.shape()),
            got: format!("{:?}", analytic.shape()),
            context: "max_rel_error".into(),
        });
    }
    let scale = oracle.norm_linf().max(1e-12);
    let worst = analytic
        .data()
        .iter()
        .zip(oracle.data())
        .map(|(a, o)| (a - o).abs())
        .fold(0.0f64, f64::max);
    Ok(worst / scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::vector(vec![0.4, -2.0, 7.0]);
        let g = fd_gradient(|_| Ok(3.5), &x, 1e-5).unwrap();
        assert!(g.norm_linf() < 1e-12);
    }

    #[test]
    fn sum_of_squares_gradient_matches_analytic() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let g = fd_gradient(|p| Ok(p.data().iter().map(|v| v * v).sum()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn rel_error_normalizes_by_oracle_scale() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let o = Tensor::vector(vec![1.0, 2.0002]);
        let e = max_rel_error(&a, &o).unwrap();
        assert!((e - 0.0002 / 2.0002).abs() < 1e-9);
    }
}
