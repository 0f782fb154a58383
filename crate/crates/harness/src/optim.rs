//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use cdnet_core::ParamStore;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moments per parameter, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore<f32>) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0f32; p.value.numel()]).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    /// One update from the accumulated gradients. Frozen parameters are
    /// skipped entirely. Gradients are checked before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<f32>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Checkpoint(format!("optimizer tracks {} parameters, store has {}", self.m.len(), store.len())));
        }
        if store.iter().any(|(_, p)| p.trainable && !p.grad.all_finite()) {
            return Err(Error::NonFinite { what: "gradient", step: self.step + 1 });
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get(id);
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let mut w = p.value.to_vec();
            for (((wi, &gi), mi), vi) in w.iter_mut().zip(p.grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = f64::from(gi);
                let mn = c.beta1 * f64::from(*mi) + (1.0 - c.beta1) * g;
                let vn = c.beta2 * f64::from(*vi) + (1.0 - c.beta2) * g * g;
                *mi = mn as f32;
                *vi = vn as f32;
                let update = (mn / bc1) / ((vn / bc2).sqrt() + c.eps);
                let decayed = f64::from(*wi) * (1.0 - lr * c.weight_decay);
                *wi = (decayed - lr * update) as f32;
            }
            let dims = p.value.dims().to_vec();
            store.set_value(id, cdnet_core::Tensor::from_vec(&dims, w)?)?;
        }
        Ok(())
    }
}

/// `lr_min + ½(lr_init − lr_min)(1 + cos(π step / total))`, no warmup.
pub fn cosine_lr(step: u64, total: u64, lr_init: f64, lr_min: f64) -> Result<f64> {
    if step > total || total == 0 {
        return Err(Error::Config(format!("step {step} outside schedule of {total}")));
    }
    let progress = step as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_init - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}
