//! Perturbed ensemble rollout: every member is perturbed and then advanced
//! by the forecaster at each lead step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::Perturber;
use crate::error::{DefError, Result};
use crate::forecaster::Forecaster;
use crate::grid::{denormalize, FieldState, NormStats};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub members: usize,
    pub lead: usize,
    pub master_seed: u64,
    /// Perturb only before the first step (ablation).
    #[serde(default)]
    pub perturb_first_only: bool,
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.members == 0 || self.lead == 0 {
            return Err(DefError::InvalidConfig("members and lead must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub index: usize,
    pub seed: u64,
    /// States at leads `1..=N`.
    pub states: Vec<FieldState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Casualty {
    pub member: usize,
    /// Lead step (1-based) at which the member stopped being finite.
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleRun {
    pub config: EnsembleConfig,
    /// Surviving members in index order.
    pub members: Vec<Member>,
    pub casualties: Vec<Casualty>,
}

impl EnsembleRun {
    pub fn lead(&self) -> usize {
        self.config.lead
    }

    /// Member states at lead index `t` (0-based, i.e. lead `t + 1`).
    pub fn at(&self, t: usize) -> Result<Vec<&FieldState>> {
        if self.members.is_empty() {
            return Err(DefError::Empty("ensemble has no surviving members"));
        }
        if t >= self.lead() {
            return Err(DefError::OutOfRange { index: t, len: self.lead() });
        }
        Ok(self.members.iter().map(|m| &m.states[t]).collect())
    }

    /// Physical-unit copies of every member trajectory.
    pub fn denormalized(&self, stats: &NormStats) -> Result<Vec<Vec<FieldState>>> {
        self.members
            .iter()
            .map(|m| m.states.iter().map(|s| denormalize(s, stats)).collect())
            .collect()
    }
}

pub fn member_seed(master: u64, member: usize) -> u64 {
    seed::derive(master, member as u64)
}

fn is_divergence(e: &DefError) -> bool {
    matches!(e, DefError::NonFinite(_) | DefError::Diverged { .. })
}

fn run_member(
    x0: &FieldState,
    forecaster: &Forecaster,
    perturber: &dyn Perturber,
    cfg: &EnsembleConfig,
    member: usize,
) -> Result<std::result::Result<Member, Casualty>> {
    let mseed = member_seed(cfg.master_seed, member);
    let mut x = x0.clone();
    let mut states = Vec::with_capacity(cfg.lead);
    for n in 0..cfg.lead {
        let step = || -> Result<FieldState> {
            let p = if n == 0 || !cfg.perturb_first_only {
                perturber.perturb(&x, seed::derive(mseed, n as u64))?
            } else {
                x.clone()
            };
            forecaster.step(&p)
        };
        match step() {
            Ok(next) => x = next,
            Err(e) if is_divergence(&e) => return Ok(Err(Casualty { member, step: n + 1 })),
            Err(e) => return Err(e),
        }
        states.push(x.clone());
    }
    Ok(Ok(Member { index: member, seed: mseed, states }))
}

/// Runs `members` independent trajectories in parallel. Members that stop
/// being finite are dropped and listed in `casualties`.
pub fn run_ensemble(
    x0: &FieldState,
    forecaster: &Forecaster,
    perturber: &dyn Perturber,
    cfg: &EnsembleConfig,
) -> Result<EnsembleRun> {
    cfg.validate()?;
    if x0.shape() != forecaster.shape() {
        return Err(crate::error::shape_err(forecaster.shape(), x0.shape()));
    }
    let results: Vec<_> = (0..cfg.members)
        .into_par_iter()
        .map(|b| run_member(x0, forecaster, perturber, cfg, b))
        .collect::<Result<_>>()?;
    let mut members = Vec::new();
    let mut casualties = Vec::new();
    for r in results {
        match r {
            Ok(m) => members.push(m),
            Err(c) => casualties.push(c),
        }
    }
    Ok(EnsembleRun { config: cfg.clone(), members, casualties })
}

fn check_members(states: &[&FieldState]) -> Result<()> {
    let first = states.first().ok_or(DefError::Empty("ensemble"))?;
    for s in states {
        if s.vars() != first.vars() || s.plane_len() != first.plane_len() {
            return Err(crate::error::shape_err(first.shape(), s.shape()));
        }
    }
    Ok(())
}

/// Pointwise mean of the physical channels.
pub fn mean_of(states: &[&FieldState]) -> Result<FieldState> {
    check_members(states)?;
    let mut acc = vec![0.0; states[0].physical().len()];
    for s in states {
        for (a, v) in acc.iter_mut().zip(s.physical()) {
            *a += v;
        }
    }
    let inv = 1.0 / states.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    states[0].physical_only().with_physical(&acc)
}

/// Pointwise population standard deviation of the physical channels.
pub fn spread_of(states: &[&FieldState]) -> Result<FieldState> {
    let mean = mean_of(states)?;
    let mut acc = vec![0.0; mean.data().len()];
    for s in states {
        for ((a, v), m) in acc.iter_mut().zip(s.physical()).zip(mean.data()) {
            *a += (v - m) * (v - m);
        }
    }
    let inv = 1.0 / states.len() as f64;
    acc.iter_mut().for_each(|a| *a = (*a * inv).sqrt());
    mean.with_physical(&acc)
}

pub fn ensemble_mean(run: &EnsembleRun, t: usize) -> Result<FieldState> {
    mean_of(&run.at(t)?)
}

pub fn ensemble_spread(run: &EnsembleRun, t: usize) -> Result<FieldState> {
    spread_of(&run.at(t)?)
}
