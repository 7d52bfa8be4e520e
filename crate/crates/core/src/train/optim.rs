//! Polynomial learning-rate decay and SGD with momentum.

use crate::{Error, Result, Tensor};

/// `lr0 · (1 − iter/max_iter)^power`.
pub fn poly_lr(iter: usize, max_iter: usize, lr0: f64, power: f64) -> Result<f64> {
    if iter > max_iter || max_iter == 0 {
        return Err(Error::Invalid(format!("poly_lr: iteration {iter} outside [0, {max_iter}]")));
    }
    Ok(lr0 * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// `v ← μ·v + (g + wd·p)`, then `p ← p − lr·v`.
pub fn sgd_step(param: &mut Tensor, grad: &[f64], velocity: &mut Tensor, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if grad.len() != param.numel() || velocity.shape() != param.shape() {
        return Err(Error::Invalid(format!(
            "sgd_step: param {:?}, grad of {} values, velocity {:?}",
            param.shape(),
            grad.len(),
            velocity.shape()
        )));
    }
    let p = param.data_mut();
    let v = velocity.data_mut();
    for i in 0..p.len() {
        v[i] = momentum * v[i] + grad[i] + weight_decay * p[i];
        p[i] -= lr * v[i];
    }
    Ok(())
}
