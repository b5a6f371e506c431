//! Central finite differences, the independent oracle for every gradient
//! path in the crate.

use super::tensor::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

/// Step used by the gradient checks unless a caller overrides it.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for [`relative_error`]; below it the comparison is
/// effectively absolute.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_difference_grad<T, F>(mut f: F, x: &Tensor<T>, step: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    assert!(step > T::zero(), "finite-difference step must be positive");
    let mut probe = x.detached();
    let mut grad = Vec::with_capacity(x.numel());
    let two = T::lit(2.0);
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (two * step));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), grad))
}

/// `|a - b| / max(|a|, |b|, RELATIVE_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Largest [`relative_error`] over paired slices.
pub fn max_relative_error<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    max_relative_error_with_floor(a, b, RELATIVE_FLOOR)
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over paired slices.
pub fn max_relative_error_with_floor<T: Scalar>(a: &[T], b: &[T], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}
