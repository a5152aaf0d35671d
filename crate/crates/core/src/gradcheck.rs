//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates the forward function, so it is an
//! independent oracle for every backward rule in the engine.

use crate::error::{Error, Result};
use crate::tensor::{no_grad, Tensor};

/// Outcome of comparing analytic and numerical gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest per-input `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub max_rel_error: f64,
    /// Per-input relative errors, in input order.
    pub rel_errors: Vec<f64>,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

/// Numerical gradient of the scalar `f()` w.r.t. every element of `inputs`,
/// perturbing the tensors' values in place by `±h`.
pub fn numeric_grad(inputs: &[Tensor<f64>], f: &dyn Fn() -> Result<Tensor<f64>>, h: f64) -> Result<Vec<Vec<f64>>> {
    let eval = || -> Result<f64> {
        let y = no_grad(f)?;
        if y.numel() != 1 {
            return Err(Error::Contract("gradcheck needs a scalar function".into()));
        }
        Ok(y.item())
    };
    let mut out = Vec::with_capacity(inputs.len());
    for t in inputs {
        let mut g = vec![0.0; t.numel()];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = t.data()[i];
            t.data_mut()[i] = orig + h;
            let plus = eval()?;
            t.data_mut()[i] = orig - h;
            let minus = eval()?;
            t.data_mut()[i] = orig;
            *gi = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

pub fn check_gradients(inputs: &[Tensor<f64>], f: &dyn Fn() -> Result<Tensor<f64>>, h: f64) -> Result<GradCheckReport> {
    let y = f()?;
    let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
    let analytic = y.grad_of(&refs)?;
    drop(y);
    let numeric = numeric_grad(inputs, f, h)?;
    let rel_errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .collect();
    Ok(GradCheckReport {
        max_rel_error: rel_errors.iter().copied().fold(0.0, f64::max),
        rel_errors,
        analytic,
        numeric,
    })
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference when both are ~0.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}
