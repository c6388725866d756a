//! First-order optimizers over parallel slices of parameters and gradients.

use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::tensor::Tensor;

fn check_shapes(params: &[Tensor], grads: &[Tensor], buffers: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return param(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return param(format!(
                "parameter {i}: shape {:?} but gradient {:?}",
                p.shape(),
                g.shape()
            ));
        }
    }
    if !buffers.is_empty() {
        if buffers.len() != params.len() {
            return param(format!(
                "optimizer state holds {} buffers for {} parameters",
                buffers.len(),
                params.len()
            ));
        }
        for (i, (p, b)) in params.iter().zip(buffers).enumerate() {
            if p.shape() != b.shape() {
                return param(format!(
                    "parameter {i}: shape {:?} but state buffer {:?}",
                    p.shape(),
                    b.shape()
                ));
            }
        }
    }
    Ok(())
}

/// Momentum buffers, created on the first step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    pub velocity: Vec<Tensor>,
}

/// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`.
pub fn sgd_momentum_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    check_shapes(params, grads, &state.velocity)?;
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = momentum * *vv + gv + weight_decay * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

/// Bias-corrected Adam update.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: AdamConfig,
) -> Result<()> {
    check_shapes(params, grads, &state.m)?;
    check_shapes(params, grads, &state.v)?;
    if state.m.is_empty() {
        state.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        state.v = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}
