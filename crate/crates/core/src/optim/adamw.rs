use super::{OptimError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| (0.0..1.0).contains(&b);
        if !in_unit(self.beta1)
            || !in_unit(self.beta2)
            || !(self.eps > 0.0)
            || !(self.weight_decay >= 0.0)
        {
            return Err(OptimError::Config(format!("{self:?}")));
        }
        Ok(())
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamWState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// One AdamW update:
/// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`,
/// `θ ← θ − η·m̂/(√v̂ + ε) − η·λ·θ` with bias-corrected `m̂`, `v̂`.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<f64>],
    state: &mut AdamWState,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    cfg.validate()?;
    if !(lr >= 0.0) {
        return Err(OptimError::Config(format!("learning rate {lr}")));
    }
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len()
    {
        return Err(OptimError::ShapeMismatch("adamw_step"));
    }
    for ((p, g), (m, v)) in params.iter().zip(grads).zip(state.m.iter().zip(&state.v)) {
        if p.numel() != g.len() || p.shape() != m.shape() || p.shape() != v.shape() {
            return Err(OptimError::ShapeMismatch("adamw_step"));
        }
    }
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(OptimError::NonFinite);
    }

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, theta) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            let mj = cfg.beta1 * m[j] as f64 + (1.0 - cfg.beta1) * g;
            let vj = cfg.beta2 * v[j] as f64 + (1.0 - cfg.beta2) * g * g;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let m_hat = mj / bc1;
            let v_hat = vj / bc2;
            let old = *theta as f64;
            *theta =
                (old - lr * m_hat / (v_hat.sqrt() + cfg.eps) - lr * cfg.weight_decay * old) as f32;
        }
    }
    Ok(())
}
