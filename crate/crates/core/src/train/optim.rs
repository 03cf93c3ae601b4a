use std::f64::consts::PI;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer and schedule state. Moments mirror the parameter store order.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: usize,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(
        params: &ParamStore<f32>,
        lr_max: f64,
        lr_min: f64,
        total_steps: usize,
        weight_decay: f64,
        seed: u64,
    ) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        TrainState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            lr_max,
            lr_min,
            total_steps,
            weight_decay,
            seed,
        }
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        cosine_lr(step, self.lr_max, self.lr_min, self.total_steps)
    }

    pub fn check_shapes(&self, params: &ParamStore<f32>) -> Result<()> {
        let ok = self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .iter()
                .zip(&self.m)
                .zip(&self.v)
                .all(|((p, m), v)| m.len() == p.tensor.numel() && v.len() == m.len());
        if !ok {
            return Err(Error::Config(
                "optimizer moments do not match the parameter shapes".into(),
            ));
        }
        if self.step > self.total_steps {
            return Err(Error::Config(format!(
                "step {} exceeds total_steps {}",
                self.step, self.total_steps
            )));
        }
        Ok(())
    }
}

/// `lr_min + (lr_max - lr_min) (1 + cos(pi step / total)) / 2`.
pub fn cosine_lr(step: usize, lr_max: f64, lr_min: f64, total_steps: usize) -> Result<f64> {
    if step > total_steps || total_steps == 0 {
        return Err(Error::Domain(format!(
            "step {step} outside the schedule 0..={total_steps}"
        )));
    }
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}

/// Global L2 norm of all gradient buffers.
pub fn grad_norm(params: &ParamStore<f32>) -> f64 {
    params
        .iter()
        .filter_map(|p| p.tensor.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore<f32>, max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if norm > max_norm && norm.is_finite() {
        let s = (max_norm / norm) as f32;
        for p in params.iter_mut() {
            if let Some(g) = &mut p.tensor.grad {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

/// One AdamW update at learning rate `lr` using the gradient buffers.
/// Parameters without a gradient are treated as having a zero gradient.
pub fn adamw_step(params: &mut ParamStore<f32>, state: &mut TrainState, lr: f64) -> Result<()> {
    state.check_shapes(params)?;
    for p in params.iter() {
        if let Some(g) = &p.tensor.grad {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in {} at index {i}",
                    p.name
                )));
            }
        }
    }
    let t = (state.step + 1) as i32;
    let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
    let decay = (1.0 - lr * state.weight_decay) as f32;
    let (b1, b2) = (BETA1 as f32, BETA2 as f32);
    let (lr_c1, inv_c2) = ((lr / c1) as f32, (1.0 / c2) as f32);
    let eps = ADAM_EPS as f32;
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = p.tensor.grad.take();
        let data = p.tensor.data_mut();
        for (k, th) in data.iter_mut().enumerate() {
            let g = grad.as_ref().map_or(0.0, |g| g[k]);
            m[k] = b1 * m[k] + (1.0 - b1) * g;
            v[k] = b2 * v[k] + (1.0 - b2) * g * g;
            *th = *th * decay - lr_c1 * m[k] / ((v[k] * inv_c2).sqrt() + eps);
        }
        p.tensor.grad = grad;
    }
    state.step += 1;
    Ok(())
}
