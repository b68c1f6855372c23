use indexmap::IndexMap;

use super::TrainError;
use crate::model::Parameters;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWSettings {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Linear warmup from 0 to `peak` over `ceil(warmup_ratio * total)` steps,
/// then linear decay to 0 at `total`.
pub fn lr_at(step: u64, total: u64, warmup_ratio: f64, peak: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let step = step.min(total) as f64;
    let total = total as f64;
    let warmup = (warmup_ratio * total).ceil();
    if step < warmup {
        peak * step / warmup
    } else {
        peak * (total - step) / (total - warmup).max(1.0)
    }
}

/// Global L2 norm over all gradients.
pub fn global_norm(grads: &IndexMap<String, Tensor<f32>>) -> f64 {
    grads.values().map(Tensor::sum_squares).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut IndexMap<String, Tensor<f32>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = (max_norm / (norm + 1e-12)) as f32;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// One AdamW update at 1-based step `t`. Only learnable tensors with a
/// gradient are touched; frozen tensors must not appear in `grads`.
pub fn adamw_step(
    params: &mut Parameters<f32>,
    moments: &mut IndexMap<String, Moments>,
    grads: &IndexMap<String, Tensor<f32>>,
    t: u64,
    lr: f64,
    s: AdamWSettings,
) -> Result<(), TrainError> {
    let bc1 = 1.0 - s.beta1.powf(t as f64);
    let bc2 = 1.0 - s.beta2.powf(t as f64);
    for (name, grad) in grads {
        let entry = params
            .get_mut(name)
            .ok_or_else(|| TrainError::Contract(format!("gradient for unknown tensor `{name}`")))?;
        if !entry.group.learnable() {
            return Err(TrainError::Contract(format!("gradient supplied for frozen tensor `{name}`")));
        }
        if entry.tensor.shape() != grad.shape() {
            return Err(TrainError::Contract(format!(
                "gradient shape {:?} does not match `{name}` {:?}",
                grad.shape(),
                entry.tensor.shape()
            )));
        }
        let decay = if entry.decays() { s.weight_decay } else { 0.0 };
        let mom = moments
            .get_mut(name)
            .ok_or_else(|| TrainError::Contract(format!("no optimizer state for `{name}`")))?;
        let (b1, b2) = (s.beta1 as f32, s.beta2 as f32);
        let shrink = (1.0 - lr * decay) as f32;
        let (lr32, bc1, bc2, eps) = (lr as f32, bc1 as f32, bc2 as f32, s.eps as f32);
        for (((p, &g), m), v) in entry
            .tensor
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(mom.m.iter_mut())
            .zip(mom.v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p * shrink - lr32 * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
