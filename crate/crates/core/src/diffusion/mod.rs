//! Conditional denoising diffusion used as a state perturbation model:
//! noise schedule, classifier-free guidance, samplers and training.

mod model;
mod perturb;
mod sampler;
mod schedule;

pub use model::{default_denoiser_spec, train_diffusion, DenoiserModel, DiffusionTrainConfig, TrainReport};
pub use perturb::{perturb, sample, DiffusionPerturber, GuidanceConfig, IdentityPerturber, Perturber, Solver};
pub use sampler::{dpm_timesteps, sample_ancestral, sample_dpm2m};
pub use schedule::{q_sample, NoiseSchedule};

use crate::error::{shape_err, Result};
use crate::nn::Slab;

/// Anything that predicts the noise in `x_t`, optionally given a clean
/// conditioning state (`None` is the null condition).
pub trait NoisePredictor: Sync {
    fn schedule(&self) -> &NoiseSchedule;
    fn predict_noise(&self, x_t: &Slab, t: usize, cond: Option<&Slab>) -> Result<Slab>;

    /// Magnitude bound for clean-state estimates in the ODE solver.
    fn x0_bound(&self) -> Option<f64> {
        None
    }
}

/// `(1 + omega) eps_c - omega eps_u`, evaluated as
/// `eps_c + omega (eps_c - eps_u)` so equal inputs are returned exactly.
pub fn cfg_combine(eps_c: &Slab, eps_u: &Slab, omega: f64) -> Result<Slab> {
    if !eps_c.same_shape(eps_u) {
        return Err(shape_err(
            format!("{}x{}x{}", eps_c.channels, eps_c.height, eps_c.width),
            format!("{}x{}x{}", eps_u.channels, eps_u.height, eps_u.width),
        ));
    }
    let mut out = eps_c.clone();
    if omega != 0.0 {
        for (o, u) in out.data.iter_mut().zip(&eps_u.data) {
            *o += omega * (*o - u);
        }
    }
    Ok(out)
}

/// Guided noise estimate. The unconditional pass is skipped when it would
/// receive zero weight.
pub fn guided_noise<M: NoisePredictor + ?Sized>(
    model: &M,
    x_t: &Slab,
    t: usize,
    cond: Option<&Slab>,
    omega: f64,
) -> Result<Slab> {
    match cond {
        Some(c) if omega != 0.0 => {
            let eps_c = model.predict_noise(x_t, t, Some(c))?;
            let eps_u = model.predict_noise(x_t, t, None)?;
            cfg_combine(&eps_c, &eps_u, omega)
        }
        _ => model.predict_noise(x_t, t, cond),
    }
}

/// Exact noise prediction for data distributed as independent `N(mean, std^2)`
/// per pixel, ignoring any condition.
#[derive(Debug, Clone)]
pub struct GaussianScore {
    pub schedule: NoiseSchedule,
    pub mean: f64,
    pub std: f64,
}

impl NoisePredictor for GaussianScore {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict_noise(&self, x_t: &Slab, t: usize, _cond: Option<&Slab>) -> Result<Slab> {
        self.schedule.check_timestep(t)?;
        let ab = self.schedule.alpha_bar(t);
        let var = ab * self.std * self.std + 1.0 - ab;
        let k = (1.0 - ab).sqrt() / var;
        let shift = ab.sqrt() * self.mean;
        let mut out = x_t.clone();
        out.data.iter_mut().for_each(|x| *x = k * (*x - shift));
        Ok(out)
    }
}
