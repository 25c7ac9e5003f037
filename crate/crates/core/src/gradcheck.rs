//! Central finite differences, used as an independent oracle for the tape.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Estimates the gradient of a scalar function coordinate by coordinate:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn fd_gradient<T, F>(mut f: F, x: &Tensor<T>, step: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    let two_h = step + step;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let hi = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let lo = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NonFinite(format!("finite difference at coordinate {i}")));
        }
        grad.push((hi - lo) / two_h);
    }
    Tensor::new(x.shape(), grad)
}

/// True when every entry satisfies `|a - b| <= atol + rtol * max(|a|, |b|)`.
pub fn all_close<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, rtol: T, atol: T) -> bool {
    a.shape() == b.shape()
        && a.data().iter().zip(b.data()).all(|(&x, &y)| (x - y).abs() <= atol + rtol * x.abs().max(y.abs()))
}
