use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DefError, Result};
use crate::nn::{clip_and_step, Adam, AdamConfig, Network, Slab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Gradient-norm threshold.
    pub tau: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(DefError::InvalidConfig("batch must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(DefError::InvalidConfig(format!("learning rate {} invalid", self.lr)));
        }
        if !(self.tau > 0.0) {
            return Err(DefError::InvalidConfig(format!("tau {} must be > 0", self.tau)));
        }
        Ok(())
    }
}

/// Mean squared error and its gradient with respect to `pred`, scaled by
/// `weight`.
pub(crate) fn mse_with_grad(pred: &Slab, target: &[f64], weight: f64) -> (f64, Slab) {
    let n = target.len() as f64;
    let mut grad = pred.clone();
    let mut loss = 0.0;
    for (g, t) in grad.data.iter_mut().zip(target) {
        let d = *g - t;
        loss += d * d;
        *g = 2.0 * d * weight / n;
    }
    (loss / n, grad)
}

/// Shuffled mini-batch loop. `sample` runs forward and backward for one
/// example (gradients scaled by the given weight) and returns its loss.
/// Returns the mean loss of each epoch.
pub(crate) fn run_epochs(
    net: &mut Network,
    n_samples: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut sample: impl FnMut(&mut Network, usize, &mut ChaCha8Rng, f64) -> Result<f64>,
) -> Result<(Vec<f64>, u64)> {
    cfg.validate()?;
    if n_samples == 0 {
        return Err(DefError::Empty("training set"));
    }
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), net.num_params());
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch) {
            let weight = 1.0 / batch.len() as f64;
            for &idx in batch {
                total += sample(net, idx, rng, weight)?;
            }
            clip_and_step(&mut net.store, &mut adam, cfg.tau).map_err(|e| match e {
                DefError::NonFinite(what) => {
                    DefError::NonFinite(format!("{what} during epoch {epoch}"))
                }
                other => other,
            })?;
        }
        let mean = total / n_samples as f64;
        if !mean.is_finite() {
            return Err(DefError::NonFinite(format!("training loss diverged at epoch {epoch}")));
        }
        curve.push(mean);
    }
    Ok((curve, adam.steps))
}
