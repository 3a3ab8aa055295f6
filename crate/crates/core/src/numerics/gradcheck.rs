//! Central finite differences, used as an independent oracle for tape gradients.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Full central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<S: Scalar>(
    mut f: impl FnMut(&Tensor<S>) -> Result<S>,
    x: &Tensor<S>,
    eps: S,
) -> Result<Tensor<S>> {
    let coords: Vec<usize> = (0..x.numel()).collect();
    let values = finite_diff_coords(&mut f, x, eps, &coords)?;
    Tensor::new(x.shape().to_vec(), values)
}

/// Central differences at selected flat coordinates only.
pub fn finite_diff_coords<S: Scalar>(
    mut f: impl FnMut(&Tensor<S>) -> Result<S>,
    x: &Tensor<S>,
    eps: S,
    coords: &[usize],
) -> Result<Vec<S>> {
    if eps <= S::zero() {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let mut probe = x.clone();
    let two = S::lit(2.0);
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + eps;
            let plus = f(&probe)?;
            probe.data_mut()[i] = orig - eps;
            let minus = f(&probe)?;
            probe.data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("objective at coordinate {i}")));
            }
            Ok((plus - minus) / (two * eps))
        })
        .collect()
}

/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}
