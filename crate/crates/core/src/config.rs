//! Flat run configuration covering every stage of the pipeline.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{default_denoiser_spec, DiffusionTrainConfig, GuidanceConfig, NoiseSchedule, Solver};
use crate::dynamics::DynamicsConfig;
use crate::ensemble::EnsembleConfig;
use crate::error::{DefError, Result};
use crate::forecaster;
use crate::nn::NetSpec;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub height: usize,
    pub width: usize,
    pub vars: usize,
    pub forcings: usize,
    pub velocity: [f64; 2],
    pub diffusivity: f64,
    pub coupling: f64,
    pub forcing_amplitude: f64,
    pub noise_amplitude: f64,
    pub day_period: f64,
    pub year_period: f64,
    pub data_seed: u64,
    /// Trajectory length written by `generate-data`.
    pub data_steps: usize,
    /// Leading states of the trajectory used for training; the rest is held out.
    pub train_states: usize,
    pub norm_epsilon: f64,

    pub net_base: usize,
    pub net_depth: usize,
    pub attention: bool,
    pub time_embed_width: usize,
    pub tau: f64,

    pub forecaster_epochs: usize,
    pub forecaster_batch: usize,
    pub forecaster_lr: f64,
    pub forecaster_seed: u64,
    pub residual: bool,

    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub diffusion_epochs: usize,
    pub diffusion_batch: usize,
    pub diffusion_lr: f64,
    pub diffusion_seed: u64,
    pub cond_prob: f64,
    pub advance_prob: f64,

    pub omega: f64,
    pub walks: usize,
    pub solver: Solver,
    pub solver_steps: usize,

    pub members: usize,
    pub lead: usize,
    /// Index of the initial state within the data file.
    pub start_index: usize,
    pub ensemble_seed: u64,
    pub perturb_first_only: bool,

    /// 1-based leads scored by `evaluate` and `sweep`.
    pub eval_leads: Vec<usize>,
    pub sweep_omegas: Vec<f64>,
    pub sweep_walks: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = DynamicsConfig::default();
        Self {
            height: d.height,
            width: d.width,
            vars: d.vars,
            forcings: d.forcings,
            velocity: d.velocity,
            diffusivity: d.diffusivity,
            coupling: d.coupling,
            forcing_amplitude: d.forcing_amplitude,
            noise_amplitude: d.noise_amplitude,
            day_period: d.day_period,
            year_period: d.year_period,
            data_seed: d.seed,
            data_steps: 400,
            train_states: 320,
            norm_epsilon: crate::grid::DEFAULT_EPSILON,
            net_base: 8,
            net_depth: 2,
            attention: true,
            time_embed_width: 32,
            tau: 1.0,
            forecaster_epochs: 30,
            forecaster_batch: 32,
            forecaster_lr: 1e-3,
            forecaster_seed: 1,
            residual: false,
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            diffusion_epochs: 30,
            diffusion_batch: 32,
            diffusion_lr: 1e-3,
            diffusion_seed: 2,
            cond_prob: 0.9,
            advance_prob: 0.5,
            omega: 0.5,
            walks: 1,
            solver: Solver::Dpm2m,
            solver_steps: 20,
            members: 32,
            lead: 40,
            start_index: 330,
            ensemble_seed: 3,
            perturb_first_only: false,
            eval_leads: vec![10, 20, 30, 40],
            sweep_omegas: vec![0.3, 0.5, 0.7, 1.0],
            sweep_walks: vec![1, 3, 7],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn dynamics(&self) -> DynamicsConfig {
        DynamicsConfig {
            height: self.height,
            width: self.width,
            vars: self.vars,
            forcings: self.forcings,
            velocity: self.velocity,
            diffusivity: self.diffusivity,
            coupling: self.coupling,
            forcing_amplitude: self.forcing_amplitude,
            noise_amplitude: self.noise_amplitude,
            day_period: self.day_period,
            year_period: self.year_period,
            seed: self.data_seed,
        }
    }

    pub fn forecaster_spec(&self) -> NetSpec {
        self.shaped(forecaster::default_spec(self.dynamics().shape()))
    }

    pub fn denoiser_spec(&self) -> NetSpec {
        let mut spec = self.shaped(default_denoiser_spec(self.vars));
        spec.time_embed_width = self.time_embed_width;
        spec
    }

    fn shaped(&self, spec: NetSpec) -> NetSpec {
        NetSpec {
            stages: NetSpec::ladder(spec.in_channels, spec.out_channels, self.net_base, self.net_depth).stages,
            attention: self.attention,
            ..spec
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)
    }

    pub fn forecaster_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.forecaster_epochs,
            batch: self.forecaster_batch,
            lr: self.forecaster_lr,
            tau: self.tau,
            seed: self.forecaster_seed,
        }
    }

    pub fn diffusion_train(&self) -> DiffusionTrainConfig {
        DiffusionTrainConfig {
            train: TrainConfig {
                epochs: self.diffusion_epochs,
                batch: self.diffusion_batch,
                lr: self.diffusion_lr,
                tau: self.tau,
                seed: self.diffusion_seed,
            },
            lambda: self.cond_prob,
            advance_prob: self.advance_prob,
        }
    }

    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            omega: self.omega,
            walks: self.walks,
            solver: self.solver,
            steps: self.solver_steps,
        }
    }

    pub fn ensemble(&self) -> EnsembleConfig {
        EnsembleConfig {
            members: self.members,
            lead: self.lead,
            master_seed: self.ensemble_seed,
            perturb_first_only: self.perturb_first_only,
        }
    }

    /// Checks every stage's preconditions.
    pub fn validate(&self) -> Result<()> {
        self.dynamics().validate()?;
        if self.data_steps < 2 {
            return Err(DefError::InvalidConfig("data_steps must be >= 2".into()));
        }
        if self.train_states < 2 || self.train_states > self.data_steps {
            return Err(DefError::InvalidConfig(format!(
                "train_states {} outside [2, {}]",
                self.train_states, self.data_steps
            )));
        }
        if !(self.norm_epsilon >= 0.0) {
            return Err(DefError::InvalidConfig("norm_epsilon must be >= 0".into()));
        }
        for spec in [self.forecaster_spec(), self.denoiser_spec()] {
            spec.validate()?;
            spec.check_grid(self.height, self.width)?;
        }
        if self.time_embed_width == 0 {
            return Err(DefError::InvalidConfig("time_embed_width must be > 0".into()));
        }
        let schedule = self.schedule()?;
        self.forecaster_train().validate()?;
        self.diffusion_train().validate()?;
        self.guidance().validate(schedule.steps())?;
        self.ensemble().validate()?;
        if let Some(&bad) = self.eval_leads.iter().find(|&&l| l == 0 || l > self.lead) {
            return Err(DefError::InvalidConfig(format!("eval lead {bad} outside [1, {}]", self.lead)));
        }
        for &omega in &self.sweep_omegas {
            GuidanceConfig { omega, ..self.guidance() }.validate(schedule.steps())?;
        }
        for &walks in &self.sweep_walks {
            GuidanceConfig { walks, ..self.guidance() }.validate(schedule.steps())?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, as lowercase hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// SHA-256 of a file's contents.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}
