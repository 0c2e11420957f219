//! Central finite-difference verification of analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Largest relative error between the backward-pass gradient of the scalar
/// `f(x)` and its central difference `(f(x+h) − f(x−h)) / 2h`, over every
/// coordinate of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_coords(f, x, h, &coords)
}

/// As [`finite_diff_check`], restricted to the listed flat coordinates.
pub fn finite_diff_check_coords<F>(mut f: F, x: &Tensor<f64>, h: f64, coords: &[usize]) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaf = g.parameter(x.clone());
    let loss = f(&mut g, leaf)?;
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {value}")));
    }
    g.backward(loss)?;
    let analytic = g.grad(leaf).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);
    if let Some(bad) = analytic.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("analytic gradient at coordinate {bad}")));
    }

    let mut eval = |probe: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.constant(probe.clone());
        let out = f(&mut g, leaf)?;
        let v = g.value(out).item()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("objective evaluated to {v} under perturbation")))
        }
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &i in coords {
        if i >= x.numel() {
            return Err(Error::Contract(format!("coordinate {i} outside tensor of {} elements", x.numel())));
        }
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        worst = worst.max(relative_error(analytic[i], (plus - minus) / (2.0 * h)));
    }
    Ok(worst)
}
