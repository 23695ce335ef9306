//! Finite-difference gradient verification.
//!
//! The checker only ever calls the forward function, so it stays independent
//! of the backward pass it is used to validate.

use crate::Result;

/// Central-difference gradient of `f` at `x`: (f(x + h e_i) - f(x - h e_i))
/// over 2h, one coordinate at a time. `f` must not mutate shared state.
pub fn finite_difference_grad(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe)?;
        probe[i] = orig - h;
        let minus = f(&probe)?;
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Symmetric relative error with an absolute floor, so comparisons near zero
/// do not explode.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}
