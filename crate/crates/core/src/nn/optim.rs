use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{DefError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    pub steps: u64,
}

/// What `clip_and_step` did to the gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipReport {
    pub raw_norm: f64,
    pub applied_norm: f64,
}

impl Adam {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Self { config, m: vec![0.0; num_params], v: vec![0.0; num_params], steps: 0 }
    }

    fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        self.steps += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
        }
    }
}

/// Rescales the accumulated gradient by `1 / max(1, ||g|| / tau)`, applies one
/// Adam update and clears the gradient buffer.
pub fn clip_and_step(store: &mut ParamStore, adam: &mut Adam, tau: f64) -> Result<ClipReport> {
    if !(tau > 0.0) {
        return Err(DefError::InvalidConfig(format!("clip threshold {tau} must be > 0")));
    }
    if store.grads.iter().any(|g| !g.is_finite()) {
        return Err(DefError::NonFinite("gradient".into()));
    }
    let raw_norm = store.grad_norm();
    let factor = 1.0 / (raw_norm / tau).max(1.0);
    if factor != 1.0 {
        store.grads.iter_mut().for_each(|g| *g *= factor);
    }
    let applied_norm = store.grad_norm();
    let (values, grads) = (&mut store.values, &store.grads);
    adam.update(values, grads);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(DefError::NonFinite("parameters after update".into()));
    }
    store.zero_grad();
    Ok(ClipReport { raw_norm, applied_norm })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with_grad(g: &[f64]) -> ParamStore {
        let mut s = ParamStore::default();
        s.alloc("w", g.len());
        s.values.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.1);
        s.grads.copy_from_slice(g);
        s
    }

    #[test]
    fn clips_to_threshold() {
        let tau = 0.5;
        // ||g|| = 2 * tau
        let mut s = store_with_grad(&[0.6, 0.8]);
        let mut adam = Adam::new(AdamConfig::with_lr(1e-3), 2);
        let r = clip_and_step(&mut s, &mut adam, tau).unwrap();
        assert!((r.raw_norm - 1.0).abs() < 1e-15);
        assert!((r.applied_norm - tau).abs() < 1e-15);
    }

    #[test]
    fn small_gradient_untouched() {
        let tau = 2.0;
        let mut s = store_with_grad(&[0.6, 0.8]); // norm tau / 2
        let mut adam = Adam::new(AdamConfig::with_lr(1e-3), 2);
        let r = clip_and_step(&mut s, &mut adam, tau).unwrap();
        assert_eq!(r.applied_norm, r.raw_norm);
        assert!(s.grads.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store_with_grad(&[0.0, 0.0, 0.0]);
        let before = s.values.clone();
        let mut adam = Adam::new(AdamConfig::with_lr(1e-2), 3);
        clip_and_step(&mut s, &mut adam, 1.0).unwrap();
        assert_eq!(s.values, before);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut s = store_with_grad(&[f64::NAN, 1.0]);
        let mut adam = Adam::new(AdamConfig::with_lr(1e-2), 2);
        assert!(clip_and_step(&mut s, &mut adam, 1.0).is_err());
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut s = ParamStore::default();
        s.alloc("x", 1);
        s.values[0] = 3.0;
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), 1);
        for _ in 0..200 {
            s.grads[0] = 2.0 * s.values[0];
            clip_and_step(&mut s, &mut adam, 10.0).unwrap();
        }
        assert!(s.values[0].abs() < 0.05);
    }
}
