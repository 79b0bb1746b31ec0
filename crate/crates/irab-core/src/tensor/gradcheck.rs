//! Central finite-difference gradient verification.

use crate::error::{CoreError, Result};

use super::{Tape, Tensor};

/// Compare the analytic gradient of a scalar function against central
/// finite differences at every coordinate of `x`.
///
/// Returns the max over coordinates of `|analytic - numeric| / max(1, |numeric|)`.
/// The function must be differentiable at `x`; callers resample if any
/// ReLU pre-activation sits within `eps` of the kink (see [`Tape::fd_safe`]).
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    let n = x.numel();
    grad_check_sampled(f, x, eps, (0..n).collect::<Vec<_>>().as_slice())
}

/// [`grad_check`] restricted to an explicit coordinate subset; the full
/// sweep is quadratic in model size, so large-model checks probe a sample.
pub fn grad_check_sampled<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    let shape = x.shape();
    let base_values = x.to_vec();

    let probe = Tensor::param(base_values.clone(), &shape)?;
    let tape = Tape::new();
    let loss = f(&tape, &probe)?;
    if loss.numel() != 1 {
        return Err(CoreError::invalid(format!(
            "grad_check requires a scalar-valued function, got shape {:?}",
            loss.shape()
        )));
    }
    tape.backward(&loss)?;
    let analytic = probe.grad_or_zeros();

    let eval = |values: Vec<f64>| -> Result<f64> {
        let t = Tape::new();
        Ok(f(&t, &Tensor::from_vec(values, &shape)?)?.item())
    };

    let mut max_err: f64 = 0.0;
    for &idx in coords {
        if idx >= base_values.len() {
            return Err(CoreError::invalid(format!(
                "grad_check coordinate {} out of range for {} elements",
                idx,
                base_values.len()
            )));
        }
        let mut plus = base_values.clone();
        plus[idx] += eps;
        let mut minus = base_values.clone();
        minus[idx] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic[idx] - numeric).abs() / numeric.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
