//! Central finite-difference gradient checks.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error used throughout: `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Evaluate `f` at `x` on a fresh tape and return its scalar value.
fn eval<E, F>(f: &F, x: &Tensor<E>) -> Result<f64>
where
    E: Element,
    F: for<'t> Fn(&'t Tape<E>, Var<'t, E>) -> Result<Var<'t, E>>,
{
    let tape = Tape::new();
    let input = tape.param(x.clone());
    let out = f(&tape, input)?;
    let v = out.value();
    if !v.is_scalar() {
        return Err(TensorError::NonScalarOutput(v.shape().to_vec()));
    }
    let s = v.item().as_f64();
    if !s.is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    Ok(s)
}

/// Analytic gradient of scalar `f` at `x`.
pub fn analytic_gradient<E, F>(f: &F, x: &Tensor<E>) -> Result<Tensor<E>>
where
    E: Element,
    F: for<'t> Fn(&'t Tape<E>, Var<'t, E>) -> Result<Var<'t, E>>,
{
    let tape = Tape::new();
    let input = tape.param(x.clone());
    let out = f(&tape, input)?;
    let grads = tape.backward(out)?;
    Ok(grads.get_or_zeros(input))
}

/// Central-difference derivative along flat coordinate `i`.
pub fn numeric_partial<E, F>(f: &F, x: &Tensor<E>, i: usize, eps: f64) -> Result<f64>
where
    E: Element,
    F: for<'t> Fn(&'t Tape<E>, Var<'t, E>) -> Result<Var<'t, E>>,
{
    let mut plus = x.clone();
    let base = plus.data()[i];
    plus.data_mut()[i] = base + E::from_f64(eps);
    let mut minus = x.clone();
    minus.data_mut()[i] = base - E::from_f64(eps);
    // use the step actually representable in E
    let h = (plus.data()[i] - minus.data()[i]).as_f64();
    Ok((eval(f, &plus)? - eval(f, &minus)?) / h)
}

/// Max relative error between the tape gradient and central differences,
/// over all coordinates of `x`.
pub fn grad_check<E, F>(f: F, x: &Tensor<E>, eps: f64) -> Result<f64>
where
    E: Element,
    F: for<'t> Fn(&'t Tape<E>, Var<'t, E>) -> Result<Var<'t, E>>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_at(f, x, eps, &coords)
}

/// [`grad_check`] restricted to the given flat coordinates.
pub fn grad_check_at<E, F>(f: F, x: &Tensor<E>, eps: f64, coords: &[usize]) -> Result<f64>
where
    E: Element,
    F: for<'t> Fn(&'t Tape<E>, Var<'t, E>) -> Result<Var<'t, E>>,
{
    if !(eps > 0.0) {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            detail: format!("eps must be positive, got {eps}"),
        });
    }
    let analytic = analytic_gradient(&f, x)?;
    let mut worst = 0.0f64;
    for &i in coords {
        let numeric = numeric_partial(&f, x, i, eps)?;
        worst = worst.max(relative_error(analytic.data()[i].as_f64(), numeric));
    }
    Ok(worst)
}
