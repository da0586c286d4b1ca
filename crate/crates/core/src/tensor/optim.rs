use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One bias-corrected Adam update of `param` in place. `step` is the
/// 1-based update count.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    slot: &mut AdamSlot,
    step: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.len() != grad.len() {
        return Err(Error::dim("adam_update", &[param.len()], &[grad.len()]));
    }
    if slot.m.is_empty() && slot.v.is_empty() {
        slot.m = vec![0.0; param.len()];
        slot.v = vec![0.0; param.len()];
    }
    if slot.m.len() != param.len() || slot.v.len() != param.len() {
        return Err(Error::dim("adam_update", &[param.len()], &[slot.m.len()]));
    }
    let t = step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..param.len() {
        let g = grad[i];
        slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g;
        slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = slot.m[i] / c1;
        let v_hat = slot.v[i] / c2;
        param[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over every tensor of a [`ParamStore`], reading the store's grads.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            slots: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.slots.len() < store.len() {
            self.slots.resize_with(store.len(), AdamSlot::default);
        }
        self.step += 1;
        for id in store.ids().collect::<Vec<_>>() {
            let tensor = store.tensor_mut(id);
            let grad = tensor
                .grad
                .take()
                .unwrap_or_else(|| vec![0.0; tensor.numel()]);
            let res = adam_update(
                tensor.data_mut(),
                &grad,
                &mut self.slots[id.index()],
                self.step,
                &self.config,
            );
            tensor.grad = Some(grad);
            res?;
        }
        Ok(())
    }
}
