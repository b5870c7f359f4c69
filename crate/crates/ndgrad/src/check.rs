//! Central-difference gradient checking.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::{NdError, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

fn eval(f: &impl Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    let v = tape
        .value(y)
        .item()
        .ok_or_else(|| NdError::NonScalarLoss(tape.shape(y).to_vec()))?;
    if !v.is_finite() {
        return Err(NdError::NonFinite { op: "finite_difference_check" });
    }
    Ok(v)
}

/// Central-difference gradient of the scalar `f` at `x` with step `eps`.
pub fn numeric_gradient(f: impl Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor, eps: f64) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    Ok(out)
}

/// Fourth-order central differences,
/// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`. Truncation error is
/// O(h⁴), so a step around 1e-3 keeps both it and roundoff near 1e-13.
pub fn numeric_gradient4(f: impl Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor, h: f64) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        let mut at = |d: f64| {
            probe.data_mut()[i] = orig + d;
            eval(&f, &probe)
        };
        let g = (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = g;
    }
    Ok(out)
}

/// Largest elementwise `|a − n| / max(|a|, |n|, 1e-6)`. The floor keeps
/// exactly-zero gradients from turning stencil roundoff into large ratios.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, 1e-12)`. Suited to large parameter vectors
/// where some entries are too small for central differences to resolve.
pub fn norm_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff: f64 = analytic.data().iter().zip(numeric.data()).map(|(a, n)| (a - n).powi(2)).sum();
    diff.sqrt() / analytic.sum_sq().sqrt().max(numeric.sum_sq().sqrt()).max(1e-12)
}

/// Largest elementwise relative error between the tape gradient of `f` at `x`
/// and central differences with step `eps`. The denominator is
/// `max(|analytic|, |numeric|, 1e-6)`.
pub fn finite_difference_check(
    f: impl Fn(&mut Tape, Var) -> Result<Var>,
    x: &Tensor,
    eps: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    if !tape.value(y).is_finite() {
        return Err(NdError::NonFinite { op: "finite_difference_check" });
    }
    let analytic = tape.backward(y)?.wrt(xv);
    let numeric = numeric_gradient(&f, x, eps)?;
    Ok(max_relative_error(&analytic, &numeric))
}
