use serde::{Deserialize, Serialize};

use super::{sample_ancestral, sample_dpm2m, NoisePredictor};
use crate::error::{DefError, Result};
use crate::grid::FieldState;
use crate::nn::Slab;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Ancestral,
    Dpm2m,
}

impl std::str::FromStr for Solver {
    type Err = DefError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ancestral" => Ok(Self::Ancestral),
            "dpm2m" => Ok(Self::Dpm2m),
            other => Err(DefError::InvalidConfig(format!("unknown solver {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub omega: f64,
    /// Number of chained perturbations per state.
    pub walks: usize,
    pub solver: Solver,
    /// Model evaluations per sample for the ODE solver.
    pub steps: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { omega: 0.5, walks: 1, solver: Solver::Dpm2m, steps: 20 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, max_steps: usize) -> Result<()> {
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(DefError::InvalidConfig(format!("omega {} must be >= 0", self.omega)));
        }
        if self.walks == 0 {
            return Err(DefError::InvalidConfig("walks must be >= 1".into()));
        }
        if self.steps == 0 || self.steps > max_steps {
            return Err(DefError::InvalidConfig(format!(
                "solver steps {} outside [1, {max_steps}]",
                self.steps
            )));
        }
        Ok(())
    }

    /// `Diffusion[omega, K]`.
    pub fn label(&self) -> String {
        format!("Diffusion[{}, {}]", self.omega, self.walks)
    }
}

/// One guided sample conditioned on `cond`.
pub fn sample<M: NoisePredictor + ?Sized>(
    model: &M,
    cond: &Slab,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<Slab> {
    let shape = [cond.channels, cond.height, cond.width];
    match cfg.solver {
        Solver::Ancestral => sample_ancestral(model, Some(cond), cfg.omega, shape, seed),
        Solver::Dpm2m => sample_dpm2m(model, Some(cond), cfg.omega, cfg.steps, shape, seed),
    }
}

/// Replaces the physical channels of a normalized state by a `walks`-long
/// chain of guided samples, each conditioned on the previous one. Call `k`
/// uses seed `derive(seed, k)`.
pub fn perturb<M: NoisePredictor + ?Sized>(
    model: &M,
    x: &FieldState,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<FieldState> {
    cfg.validate(model.schedule().steps())?;
    let mut cond = Slab::from_vec(x.vars(), x.height(), x.width(), x.physical().to_vec())?;
    for k in 0..cfg.walks {
        cond = sample(model, &cond, cfg, seed::derive(seed, k as u64))?;
    }
    x.with_physical(&cond.data)
}

/// Per-state perturbation applied by the ensemble engine.
pub trait Perturber: Sync {
    fn perturb(&self, x: &FieldState, seed: u64) -> Result<FieldState>;
}

pub struct DiffusionPerturber<'a, M: NoisePredictor + ?Sized> {
    pub model: &'a M,
    pub cfg: GuidanceConfig,
}

impl<M: NoisePredictor + ?Sized> Perturber for DiffusionPerturber<'_, M> {
    fn perturb(&self, x: &FieldState, seed: u64) -> Result<FieldState> {
        perturb(self.model, x, &self.cfg, seed)
    }
}

/// Leaves states unchanged; turns an ensemble into copies of the
/// deterministic rollout.
pub struct IdentityPerturber;

impl Perturber for IdentityPerturber {
    fn perturb(&self, x: &FieldState, _seed: u64) -> Result<FieldState> {
        Ok(x.clone())
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Mutex;

    use super::*;
    use crate::diffusion::{GaussianScore, NoiseSchedule};
    use crate::grid::GridShape;

    /// Records every call and its conditioning slab.
    struct Logged {
        inner: GaussianScore,
        calls: Mutex<Vec<(usize, Option<Vec<f64>>)>>,
    }

    impl NoisePredictor for Logged {
        fn schedule(&self) -> &NoiseSchedule {
            &self.inner.schedule
        }
        fn predict_noise(&self, x_t: &Slab, t: usize, cond: Option<&Slab>) -> Result<Slab> {
            self.calls.lock().unwrap().push((t, cond.map(|c| c.data.clone())));
            self.inner.predict_noise(x_t, t, cond)
        }
    }

    fn state() -> FieldState {
        let shape = GridShape { vars: 1, forcings: 2, height: 2, width: 2 };
        FieldState::new(shape, 5, (0..12).map(|i| i as f64 * 0.1).collect()).unwrap()
    }

    fn model() -> GaussianScore {
        GaussianScore { schedule: NoiseSchedule::linear(100, 1e-3, 0.1).unwrap(), mean: 0.0, std: 1.0 }
    }

    #[test]
    fn walks_chain_conditions() {
        let cfg = GuidanceConfig { omega: 0.0, walks: 3, solver: Solver::Dpm2m, steps: 4 };
        let logged = Logged { inner: model(), calls: Mutex::new(Vec::new()) };
        let x = state();
        let out = perturb(&logged, &x, &cfg, 21).unwrap();

        let one = GuidanceConfig { walks: 1, ..cfg.clone() };
        let mut manual = x.clone();
        let mut conds = Vec::new();
        for k in 0..3 {
            conds.push(manual.physical().to_vec());
            let c = Slab::from_vec(1, 2, 2, manual.physical().to_vec()).unwrap();
            let s = sample(&model(), &c, &one, seed::derive(21, k)).unwrap();
            manual = manual.with_physical(&s.data).unwrap();
        }
        assert_eq!(out, manual);
        let calls = logged.calls.lock().unwrap();
        assert_eq!(calls.len(), 12);
        for (k, chunk) in calls.chunks(4).enumerate() {
            assert!(chunk.iter().all(|(_, c)| c.as_deref() == Some(conds[k].as_slice())));
        }
    }

    #[test]
    fn single_walk_is_single_sample() {
        let cfg = GuidanceConfig { omega: 0.5, walks: 1, solver: Solver::Ancestral, steps: 1 };
        let x = state();
        let out = perturb(&model(), &x, &cfg, 3).unwrap();
        let c = Slab::from_vec(1, 2, 2, x.physical().to_vec()).unwrap();
        let s = sample(&model(), &c, &cfg, seed::derive(3, 0)).unwrap();
        assert_eq!(out.physical(), s.data.as_slice());
        assert_eq!(out.forcing(), x.forcing());
        assert_eq!(out.time_index, x.time_index);
    }

    #[test]
    fn guidance_skips_unconditional_at_zero_omega() {
        let logged = Logged { inner: model(), calls: Mutex::new(Vec::new()) };
        let x = state();
        let cfg = GuidanceConfig { omega: 0.0, walks: 1, solver: Solver::Dpm2m, steps: 5 };
        perturb(&logged, &x, &cfg, 0).unwrap();
        assert!(logged.calls.lock().unwrap().iter().all(|(_, c)| c.is_some()));
        logged.calls.lock().unwrap().clear();
        perturb(&logged, &x, &GuidanceConfig { omega: 0.3, ..cfg }, 0).unwrap();
        let calls = logged.calls.lock().unwrap();
        assert_eq!(calls.len(), 10);
        assert_eq!(calls.iter().filter(|(_, c)| c.is_none()).count(), 5);
    }

    #[test]
    fn validates_config() {
        let x = state();
        let m = model();
        for cfg in [
            GuidanceConfig { omega: -0.1, ..Default::default() },
            GuidanceConfig { walks: 0, ..Default::default() },
            GuidanceConfig { steps: 0, ..Default::default() },
            GuidanceConfig { steps: 101, ..Default::default() },
        ] {
            assert!(perturb(&m, &x, &cfg, 0).is_err());
        }
        assert_eq!("dpm2m".parse::<Solver>().unwrap(), Solver::Dpm2m);
        assert!("euler".parse::<Solver>().is_err());
        assert_eq!(GuidanceConfig::default().label(), "Diffusion[0.5, 1]");
    }
}
