//! Finite-difference helpers for checking analytic gradients.

use crate::params::Parameterized;

/// `(f(w + h) - f(w - h)) / 2h` for one scalar parameter; the weight is
/// restored afterwards.
pub fn central_difference<M, F>(model: &mut M, tensor: usize, index: usize, h: f64, mut f: F) -> f64
where
    M: Parameterized,
    F: FnMut(&M) -> f64,
{
    let original = model.param_slices()[tensor][index];
    model.param_slices_mut()[tensor][index] = original + h;
    let plus = f(model);
    model.param_slices_mut()[tensor][index] = original - h;
    let minus = f(model);
    model.param_slices_mut()[tensor][index] = original;
    (plus - minus) / (2.0 * h)
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
