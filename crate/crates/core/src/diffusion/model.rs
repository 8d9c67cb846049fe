use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NoisePredictor, NoiseSchedule};
use crate::error::{shape_err, DefError, Result};
use crate::forecaster::Forecaster;
use crate::grid::{FieldState, GridShape, NormStats};
use crate::nn::{checkpoint, NetSpec, Network, Slab};
use crate::seed;
use crate::train::{mse_with_grad, run_epochs, TrainConfig};

/// Network input: noisy state, conditioning state, the noise implied by the
/// condition `(x_t - sqrt(abar) c) / sqrt(1 - abar)` (each `v` channels) and a
/// constant indicator channel. For the null condition the middle two blocks
/// and the indicator are zero. With a condition the implied noise is also
/// added to the network output, so the network learns a correction to it.
pub fn default_denoiser_spec(vars: usize) -> NetSpec {
    let mut spec = NetSpec::ladder(input_channels(vars), vars, 8, 2);
    spec.time_embed_width = 32;
    spec
}

fn input_channels(vars: usize) -> usize {
    3 * vars + 1
}

fn implied_noise<'a>(x_t: &'a [f64], alpha_bar: f64, c: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x_t.iter().zip(c).map(move |(x, c)| (x - a * c) / s)
}

fn assemble_input(x_t: Slab, alpha_bar: f64, cond: Option<&Slab>) -> Slab {
    let n = x_t.data.len();
    let plane = x_t.plane();
    let channels = input_channels(x_t.channels);
    let mut data = Vec::with_capacity(channels * plane);
    data.extend_from_slice(&x_t.data);
    match cond {
        Some(c) => {
            data.extend_from_slice(&c.data);
            data.extend(implied_noise(&x_t.data, alpha_bar, &c.data));
            data.resize(3 * n + plane, 1.0);
        }
        None => data.resize(3 * n + plane, 0.0),
    }
    Slab { channels, height: x_t.height, width: x_t.width, data }
}

/// Adds the condition's implied noise to a raw network output.
fn add_skip(out: &mut Slab, input: &Slab) {
    if input.data[input.data.len() - 1] != 0.0 {
        let n = out.data.len();
        for (o, e) in out.data.iter_mut().zip(&input.data[2 * n..3 * n]) {
            *o += e;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DenoiserMeta {
    kind: String,
    schedule: NoiseSchedule,
    stats: NormStats,
    shape: GridShape,
}

#[derive(Debug, Clone)]
pub struct DenoiserModel {
    net: Network,
    pub schedule: NoiseSchedule,
    pub stats: NormStats,
    /// Physical channels and grid the model operates on (forcings are never
    /// noised or predicted).
    pub shape: GridShape,
    pub trained_steps: u64,
    pub x0_bound: Option<f64>,
}

impl DenoiserModel {
    pub fn new(
        spec: &NetSpec,
        schedule: NoiseSchedule,
        stats: NormStats,
        shape: GridShape,
        init_seed: u64,
    ) -> Result<Self> {
        if spec.in_channels != input_channels(shape.vars) || spec.out_channels != shape.vars {
            return Err(shape_err(
                format!("{} -> {} channels", input_channels(shape.vars), shape.vars),
                format!("{} -> {}", spec.in_channels, spec.out_channels),
            ));
        }
        if spec.time_embed_width == 0 {
            return Err(DefError::InvalidConfig("denoiser needs a time embedding".into()));
        }
        if stats.vars() != shape.vars {
            return Err(shape_err(shape.vars, stats.vars()));
        }
        spec.check_grid(shape.height, shape.width)?;
        Ok(Self { net: Network::new(spec, init_seed)?, schedule, stats, shape, trained_steps: 0, x0_bound: None })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    /// Shape of the physical slab being sampled.
    pub fn slab_shape(&self) -> [usize; 3] {
        [self.shape.vars, self.shape.height, self.shape.width]
    }

    fn input(&self, x_t: &Slab, t: usize, cond: Option<&Slab>) -> Result<Slab> {
        let [v, h, w] = self.slab_shape();
        x_t.check_shape(v, h, w)?;
        if let Some(c) = cond {
            c.check_shape(v, h, w)?;
        }
        Ok(assemble_input(x_t.clone(), self.schedule.alpha_bar(t), cond))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = DenoiserMeta {
            kind: "denoiser".into(),
            schedule: self.schedule.clone(),
            stats: self.stats.clone(),
            shape: self.shape,
        };
        checkpoint::save(path, &self.net, self.trained_steps, serde_json::to_value(meta)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, net) = checkpoint::load(path)?;
        let meta: DenoiserMeta = serde_json::from_value(header.extra)?;
        if meta.kind != "denoiser" {
            return Err(DefError::Format(format!("expected denoiser checkpoint, got {}", meta.kind)));
        }
        let mut model = Self::new(&header.net, meta.schedule, meta.stats, meta.shape, 0)?;
        model.net = net;
        model.trained_steps = header.step;
        Ok(model)
    }
}

impl NoisePredictor for DenoiserModel {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict_noise(&self, x_t: &Slab, t: usize, cond: Option<&Slab>) -> Result<Slab> {
        self.schedule.check_timestep(t)?;
        let input = self.input(x_t, t, cond)?;
        let mut out = self.net.predict(&input, Some(t as f64))?;
        add_skip(&mut out, &input);
        Ok(out)
    }

    fn x0_bound(&self) -> Option<f64> {
        self.x0_bound
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrainConfig {
    pub train: TrainConfig,
    /// Probability of training a sample with its condition rather than the
    /// null condition.
    pub lambda: f64,
    /// Probability of replacing a sample by its one-step forecast.
    pub advance_prob: f64,
}

impl DiffusionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        for (name, p) in [("lambda", self.lambda), ("advance probability", self.advance_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(DefError::InvalidConfig(format!("{name} {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss of each epoch.
    pub curve: Vec<f64>,
    pub conditional: u64,
    pub unconditional: u64,
    /// Samples replaced by their one-step forecast.
    pub advanced: u64,
}

/// Classifier-free guidance training on a normalized dataset. Each sample is
/// advanced through the forecaster with probability `advance_prob`, noised at
/// a uniformly drawn step, and conditioned on its own clean state with
/// probability `lambda` (null condition otherwise).
pub fn train_diffusion(
    model: &mut DenoiserModel,
    dataset: &[FieldState],
    forecaster: &Forecaster,
    cfg: &DiffusionTrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(DefError::Empty("diffusion training set"));
    }
    if forecaster.trained_steps == 0 {
        return Err(DefError::InvalidConfig("forecaster is untrained".into()));
    }
    if forecaster.shape() != dataset[0].shape() {
        return Err(shape_err(forecaster.shape(), dataset[0].shape()));
    }
    let [v, h, w] = model.slab_shape();
    let slab = |s: &FieldState| -> Result<Slab> {
        if s.vars() != v || s.height() != h || s.width() != w {
            return Err(shape_err(model.shape, s.shape()));
        }
        Slab::from_vec(v, h, w, s.physical().to_vec())
    };
    let current: Vec<Slab> = dataset.iter().map(slab).collect::<Result<_>>()?;
    let advanced: Vec<Slab> = dataset
        .iter()
        .map(|s| forecaster.step(s).and_then(|n| slab(&n)))
        .collect::<Result<_>>()?;

    let n = v * h * w;
    let t_max = model.schedule.steps();
    let schedule = model.schedule.clone();
    let mut report = TrainReport::default();
    let mut rng = seed::rng(seed::derive(cfg.train.seed, 2));
    let (curve, steps) = run_epochs(&mut model.net, dataset.len(), &cfg.train, &mut rng, |net, i, rng, weight| {
        let advance = rng.gen_bool(cfg.advance_prob);
        let x0 = if advance { &advanced[i] } else { &current[i] };
        let t = rng.gen_range(1..=t_max);
        let eps = seed::standard_normal(rng, n);
        let conditional = rng.gen_bool(cfg.lambda);
        report.advanced += advance as u64;
        if conditional {
            report.conditional += 1;
        } else {
            report.unconditional += 1;
        }
        let x_t = Slab::from_vec(v, h, w, schedule.forward_noise(&x0.data, t, &eps)?)?;
        let input = assemble_input(x_t, schedule.alpha_bar(t), conditional.then_some(x0));
        let mut pred = net.forward(&input, Some(t as f64))?;
        add_skip(&mut pred, &input);
        let (loss, grad) = mse_with_grad(&pred, &eps, weight);
        net.backward(&grad)?;
        Ok(loss)
    })?;
    model.trained_steps += steps;
    report.curve = curve;
    Ok(report)
}
