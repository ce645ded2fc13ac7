//! Mean-reduced losses with analytic gradients.

use crate::error::{NnError, Result};
use crate::tensor::{Scalar, Tensor4};

/// Clamp bound for binary cross entropy.
pub const BCE_EPS: f64 = 1e-7;

fn check_shapes<T: Scalar>(pred: &Tensor4<T>, target: &Tensor4<T>, what: &str) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(NnError::ShapeMismatch(format!(
            "{what}: pred {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Binary cross entropy over clamped predictions.
/// Returns the scalar loss and its gradient with respect to `pred`.
pub fn bce_loss<T: Scalar>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<(T, Tensor4<T>)> {
    check_shapes(pred, target, "bce")?;
    let count = T::from_f64(pred.len() as f64);
    let lo = T::from_f64(BCE_EPS);
    let hi = T::from_f64(1.0 - BCE_EPS);
    let mut grad = Tensor4::zeros(pred.n, pred.c, pred.h, pred.w);
    let mut loss = T::ZERO;
    for i in 0..pred.data.len() {
        let p_raw = pred.data[i];
        let t = target.data[i];
        let p = p_raw.maximum(lo).minimum(hi);
        loss += -(t * p.ln() + (T::ONE - t) * (T::ONE - p).ln());
        // Clamped coordinates have zero local slope.
        grad.data[i] = if p_raw > lo && p_raw < hi {
            (p - t) / (p * (T::ONE - p) * count)
        } else {
            T::ZERO
        };
    }
    Ok((loss / count, grad))
}

/// Mean squared error.
pub fn mse_loss<T: Scalar>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<(T, Tensor4<T>)> {
    check_shapes(pred, target, "mse")?;
    let count = T::from_f64(pred.len() as f64);
    let mut grad = Tensor4::zeros(pred.n, pred.c, pred.h, pred.w);
    let mut loss = T::ZERO;
    let two = T::from_f64(2.0);
    for i in 0..pred.data.len() {
        let d = pred.data[i] - target.data[i];
        loss += d * d;
        grad.data[i] = two * d / count;
    }
    Ok((loss / count, grad))
}
