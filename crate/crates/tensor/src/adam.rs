use crate::{Gradients, ParamStore, Result, TensorError};

/// Adam hyperparameters. The betas and epsilon are the usual defaults; the
/// learning rate comes from the run configuration.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig::with_lr(2e-5)
    }
}

/// First/second moment buffers plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let m = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamState { cfg, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    /// One bias-corrected update. The step counter is incremented before the
    /// bias correction, so the first call uses t = 1.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - self.cfg.beta1.powf(t);
        let c2 = 1.0 - self.cfg.beta2.powf(t);
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for (pi, tensor) in store.tensors_mut().iter_mut().enumerate() {
            let g = grads.by_id(crate::ParamId(pi)).data();
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            let data = tensor.data_mut();
            for i in 0..data.len() {
                let gi = g[i];
                if !gi.is_finite() {
                    return Err(TensorError::NonFiniteGrad { param: names[pi].clone(), coord: i });
                }
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * gi;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                data[i] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}
