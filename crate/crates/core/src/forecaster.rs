//! Deterministic next-state model: a U-Net mapping a normalized state (physical
//! plus forcing channels) to the next normalized physical state.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{forcing_channels, DynamicsConfig};
use crate::error::{shape_err, DefError, Result};
use crate::grid::{FieldState, GridShape, NormStats};
use crate::nn::{checkpoint, NetSpec, Network, Slab};
use crate::seed;
use crate::train::{mse_with_grad, run_epochs, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ForecasterMeta {
    kind: String,
    stats: NormStats,
    dynamics: DynamicsConfig,
    residual: bool,
}

#[derive(Debug, Clone)]
pub struct Forecaster {
    net: Network,
    pub stats: NormStats,
    /// Source of the forcing channels recomputed at every step.
    pub dynamics: DynamicsConfig,
    /// Predict `x_{t+1} - x_t` instead of `x_{t+1}`.
    pub residual: bool,
    pub trained_steps: u64,
}

pub fn default_spec(shape: GridShape) -> NetSpec {
    NetSpec::ladder(shape.vars + shape.forcings, shape.vars, 8, 2)
}

impl Forecaster {
    pub fn new(
        spec: &NetSpec,
        stats: NormStats,
        dynamics: DynamicsConfig,
        residual: bool,
        init_seed: u64,
    ) -> Result<Self> {
        dynamics.validate()?;
        let shape = dynamics.shape();
        if spec.in_channels != shape.channels() || spec.out_channels != shape.vars {
            return Err(shape_err(
                format!("{} -> {} channels", shape.channels(), shape.vars),
                format!("{} -> {}", spec.in_channels, spec.out_channels),
            ));
        }
        if spec.time_embed_width != 0 {
            return Err(DefError::InvalidConfig("forecaster takes no time embedding".into()));
        }
        if stats.vars() != shape.vars {
            return Err(shape_err(shape.vars, stats.vars()));
        }
        spec.check_grid(shape.height, shape.width)?;
        Ok(Self { net: Network::new(spec, init_seed)?, stats, dynamics, residual, trained_steps: 0 })
    }

    pub fn shape(&self) -> GridShape {
        self.dynamics.shape()
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    fn input_slab(&self, x: &FieldState) -> Result<Slab> {
        if x.shape() != self.shape() {
            return Err(shape_err(self.shape(), x.shape()));
        }
        Slab::from_vec(x.vars() + x.forcings(), x.height(), x.width(), x.data().to_vec())
    }

    /// Predicted next normalized physical channels.
    fn predict_physical(&self, x: &FieldState) -> Result<Vec<f64>> {
        let mut y = self.net.predict(&self.input_slab(x)?, None)?.data;
        if self.residual {
            for (p, v) in y.iter_mut().zip(x.physical()) {
                *p += v;
            }
        }
        Ok(y)
    }

    /// One autoregressive step on a normalized state. The output carries the
    /// forcing channels of `time_index + 1`.
    pub fn step(&self, x: &FieldState) -> Result<FieldState> {
        let physical = self.predict_physical(x)?;
        if physical.iter().any(|v| !v.is_finite()) {
            return Err(DefError::NonFinite(format!("forecast from t={}", x.time_index)));
        }
        let next_t = x.time_index + 1;
        let mut data = physical;
        data.extend(forcing_channels(next_t, &self.dynamics));
        FieldState::new(x.shape(), next_t, data)
    }

    /// `n` states `x_1 .. x_n` obtained by repeated [`Forecaster::step`].
    pub fn rollout(&self, x0: &FieldState, n: usize) -> Result<Vec<FieldState>> {
        if n == 0 {
            return Err(DefError::InvalidConfig("rollout length must be >= 1".into()));
        }
        let mut out: Vec<FieldState> = Vec::with_capacity(n);
        for step in 0..n {
            let prev = out.last().unwrap_or(x0);
            let next = self.step(prev).map_err(|e| match e {
                DefError::NonFinite(_) => DefError::Diverged { step: step + 1 },
                other => other,
            })?;
            out.push(next);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = ForecasterMeta {
            kind: "forecaster".into(),
            stats: self.stats.clone(),
            dynamics: self.dynamics.clone(),
            residual: self.residual,
        };
        checkpoint::save(path, &self.net, self.trained_steps, serde_json::to_value(meta)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, net) = checkpoint::load(path)?;
        let meta: ForecasterMeta = serde_json::from_value(header.extra)?;
        if meta.kind != "forecaster" {
            return Err(DefError::Format(format!("expected forecaster checkpoint, got {}", meta.kind)));
        }
        let mut model = Self::new(&header.net, meta.stats, meta.dynamics, meta.residual, 0)?;
        model.net = net;
        model.trained_steps = header.step;
        Ok(model)
    }
}

/// MSE training on normalized `(x_t, x_{t+1})` pairs; returns the per-epoch
/// mean loss.
pub fn train_forecaster(
    model: &mut Forecaster,
    pairs: &[(FieldState, FieldState)],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(DefError::Empty("training pairs"));
    }
    let shape = model.shape();
    let inputs: Vec<Slab> = pairs.iter().map(|(x, _)| model.input_slab(x)).collect::<Result<_>>()?;
    if let Some((_, y)) = pairs.iter().find(|(_, y)| y.physical().len() != shape.vars * shape.plane()) {
        return Err(shape_err(shape.vars * shape.plane(), y.physical().len()));
    }
    let targets: Vec<Vec<f64>> = pairs
        .iter()
        .map(|(x, y)| {
            if model.residual {
                y.physical().iter().zip(x.physical()).map(|(a, b)| a - b).collect()
            } else {
                y.physical().to_vec()
            }
        })
        .collect();
    let mut rng = seed::rng(seed::derive(cfg.seed, 1));
    let (curve, steps) = run_epochs(&mut model.net, pairs.len(), cfg, &mut rng, |net, i, _, w| {
        let pred = net.forward(&inputs[i], None)?;
        let (loss, grad) = mse_with_grad(&pred, &targets[i], w);
        net.backward(&grad)?;
        Ok(loss)
    })?;
    model.trained_steps += steps;
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::generate_trajectory;
    use crate::grid::{compute_stats, make_windows, normalize};

    fn small_dynamics() -> DynamicsConfig {
        DynamicsConfig { height: 8, width: 8, vars: 2, forcings: 4, ..Default::default() }
    }

    fn setup() -> (Forecaster, Vec<FieldState>) {
        let dyn_cfg = small_dynamics();
        let traj = generate_trajectory(&dyn_cfg, 12).unwrap();
        let stats = compute_stats(&traj, 1e-6).unwrap();
        let norm: Vec<_> = traj.iter().map(|s| normalize(s, &stats).unwrap()).collect();
        let spec = NetSpec::ladder(6, 2, 4, 2);
        (Forecaster::new(&spec, stats, dyn_cfg, false, 3).unwrap(), norm)
    }

    #[test]
    fn step_advances_time_and_forcing() {
        let (model, states) = setup();
        let next = model.step(&states[3]).unwrap();
        assert_eq!(next.time_index, states[3].time_index + 1);
        assert_eq!(next.forcing(), forcing_channels(next.time_index, &model.dynamics).as_slice());
    }

    #[test]
    fn rollout_composes() {
        let (mut model, states) = setup();
        let pairs = make_windows(&states, 1).unwrap();
        let cfg = TrainConfig { epochs: 2, batch: 4, lr: 1e-2, tau: 1.0, seed: 0 };
        train_forecaster(&mut model, &pairs, &cfg).unwrap();
        let one = model.rollout(&states[0], 1).unwrap();
        assert_eq!(one[0], model.step(&states[0]).unwrap());
        let full = model.rollout(&states[0], 5).unwrap();
        let head = model.rollout(&states[0], 2).unwrap();
        let tail = model.rollout(&head[1], 3).unwrap();
        assert_eq!(&full[..2], head.as_slice());
        assert_eq!(&full[2..], tail.as_slice());
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (mut model, states) = setup();
        let before = model.network().store.values.clone();
        let pairs = make_windows(&states, 1).unwrap();
        let cfg = TrainConfig { epochs: 0, batch: 4, lr: 1e-3, tau: 1.0, seed: 0 };
        let curve = train_forecaster(&mut model, &pairs, &cfg).unwrap();
        assert!(curve.is_empty());
        assert_eq!(model.network().store.values, before);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig { epochs: 2, batch: 3, lr: 1e-3, tau: 1.0, seed: 9 };
        let run = || {
            let (mut model, states) = setup();
            let pairs = make_windows(&states, 1).unwrap();
            let curve = train_forecaster(&mut model, &pairs, &cfg).unwrap();
            (model.network().store.values.clone(), curve)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_bad_inputs() {
        let (mut model, states) = setup();
        let cfg = TrainConfig { epochs: 1, batch: 4, lr: 1e-3, tau: 1.0, seed: 0 };
        assert!(train_forecaster(&mut model, &[], &cfg).is_err());
        assert!(model.rollout(&states[0], 0).is_err());
        let wrong = FieldState::zeros(GridShape { vars: 2, forcings: 4, height: 4, width: 8 }, 0);
        assert!(model.step(&wrong).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let (model, states) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ckpt");
        model.save(&path).unwrap();
        let loaded = Forecaster::load(&path).unwrap();
        assert_eq!(loaded.stats, model.stats);
        assert_eq!(loaded.dynamics, model.dynamics);
        let a = model.step(&states[0]).unwrap();
        let b = loaded.step(&states[0]).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-4);
        }
    }
}
