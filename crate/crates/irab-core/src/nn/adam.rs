//! Adam optimizer state and the EMA teacher update.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Per-parameter Adam moments plus hyperparameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub(crate) m: Vec<Vec<f64>>,
    pub(crate) v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        OptimizerState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// One bias-corrected Adam update over `params`, reading each parameter's
/// gradient slot (absent gradients count as zero). Aborts on non-finite
/// gradients, naming the offending parameter.
pub fn adam_step(opt: &mut OptimizerState, params: &[Tensor]) -> Result<()> {
    if opt.m.len() != params.len() {
        return Err(CoreError::invalid(format!(
            "optimizer tracks {} parameters, got {}",
            opt.m.len(),
            params.len()
        )));
    }
    opt.step += 1;
    let bc1 = 1.0 - opt.beta1.powi(opt.step as i32);
    let bc2 = 1.0 - opt.beta2.powi(opt.step as i32);
    for (idx, param) in params.iter().enumerate() {
        let grad = param.grad_or_zeros();
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(CoreError::numeric(format!(
                "non-finite gradient in parameter {} (shape {:?}) at optimizer step {}",
                idx,
                param.shape(),
                opt.step
            )));
        }
        let m = &mut opt.m[idx];
        let v = &mut opt.v[idx];
        if m.len() != grad.len() {
            return Err(CoreError::invalid(format!(
                "moment buffer {} has {} entries, parameter has {}",
                idx,
                m.len(),
                grad.len()
            )));
        }
        let mut values = param.values_mut();
        for i in 0..grad.len() {
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * grad[i];
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            values[i] -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
        }
    }
    Ok(())
}

/// In-place exponential moving average: `teacher <- alpha*teacher + (1-alpha)*student`.
pub fn ema_update(teacher: &[Tensor], student: &[Tensor], alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CoreError::invalid(format!(
            "ema alpha must lie in [0, 1], got {}",
            alpha
        )));
    }
    if teacher.len() != student.len() {
        return Err(CoreError::invalid(format!(
            "ema parameter count mismatch: {} vs {}",
            teacher.len(),
            student.len()
        )));
    }
    for (t, s) in teacher.iter().zip(student) {
        if t.shape() != s.shape() {
            return Err(CoreError::ShapeMismatch {
                op: "ema_update",
                left: t.shape(),
                right: s.shape(),
            });
        }
        let sv = s.to_vec();
        let mut tv = t.values_mut();
        for (tv_i, sv_i) in tv.iter_mut().zip(sv) {
            *tv_i = alpha * *tv_i + (1.0 - alpha) * sv_i;
        }
    }
    Ok(())
}
