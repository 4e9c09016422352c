//! Central finite differences for checking reverse-mode gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for [`relative_error`]; below it the comparison is absolute.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Central-difference gradient of a scalar function of one tensor.
pub fn numeric_gradient<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Largest elementwise [`relative_error`] between two gradients.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of `f` at `x` with central differences of step `eps`
/// and returns the maximum relative error.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(t.clone())?;
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone())?;
    let out = f(&mut tape, v)?;
    if tape.value(out).len() != 1 {
        return Err(Error::shape("grad_check", "function must return a scalar"));
    }
    let mut grads = tape.backward(out)?;
    let analytic = grads.take(v).unwrap_or_else(|| Tensor::zeros(x.shape()));
    let numeric = numeric_gradient(eval, x, eps)?;
    Ok(max_relative_error(&analytic, &numeric))
}
