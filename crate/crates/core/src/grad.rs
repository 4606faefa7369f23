//! Gradient bookkeeping and the central-difference oracle used to verify
//! every hand-written backward pass.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default central-difference step for double precision.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradient of a scalar loss with respect to an op's input and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradPair {
    pub input: Tensor,
    pub params: BTreeMap<String, Tensor>,
}

impl GradPair {
    pub fn param(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("no gradient named {name}"))
    }
}

/// Central differences `(f(x+h·e_i) − f(x−h·e_i)) / 2h` for every coordinate.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(Error::contract(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective evaluated to {plus}/{minus} at coordinate {i}"
            )));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Like [`finite_diff_grad`] but only probes the listed flat coordinates.
/// Returns the numerical derivative for each, in order.
pub fn finite_diff_coords(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    coords: &[usize],
    h: f64,
) -> Result<Vec<f64>> {
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - h;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("objective non-finite at coordinate {i}")));
            }
            Ok((plus - minus) / (2.0 * h))
        })
        .collect()
}

/// Gradients smaller than this are compared absolutely; central differences
/// in double precision carry roughly `1e-11` of rounding noise.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Symmetric relative error `|a−n| / max(|a|+|n|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Largest elementwise [`relative_error`] between two equally shaped tensors.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> Result<f64> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::shape("max_relative_error", analytic.shape(), numeric.shape()));
    }
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}
