use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use def_cli::*;
use def_core::config::RunConfig;
use def_core::diffusion::Solver;

/// Diffusion-augmented ensemble forecasting on a synthetic grid system.
#[derive(Parser)]
#[command(name = "def", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// JSON run configuration (plain or a config-echo file); unset keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct Guidance {
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    walks: Option<usize>,
    #[arg(long)]
    solver: Option<Solver>,
    /// Model evaluations per dpm2m sample.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct Models {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt_f: PathBuf,
    #[arg(long)]
    ckpt_d: PathBuf,
    /// Index of the initial state in the data file.
    #[arg(long)]
    start: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a trajectory and write it as a DEF1 file.
    GenerateData {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Grid as HEIGHTxWIDTH, e.g. 32x16.
        #[arg(long, value_parser = parse_grid)]
        grid: Option<(usize, usize)>,
    },
    /// Train the deterministic forecaster.
    TrainForecaster {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Train the conditional denoiser.
    TrainDiffusion {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt_f: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Probability of training with the condition rather than the null condition.
        #[arg(long)]
        cond_prob: Option<f64>,
    },
    /// Draw perturbations of one state.
    Perturb {
        #[command(flatten)]
        cfg: ConfigArg,
        #[command(flatten)]
        models: Models,
        #[command(flatten)]
        guidance: Guidance,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Perturbed ensemble rollout plus the deterministic baseline.
    Rollout {
        #[command(flatten)]
        cfg: ConfigArg,
        #[command(flatten)]
        models: Models,
        #[command(flatten)]
        guidance: Guidance,
        #[arg(long)]
        members: Option<usize>,
        #[arg(long)]
        lead: Option<usize>,
        #[arg(long)]
        perturb_first_only: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a rollout against the truth trajectory.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Comma-separated 1-based leads; defaults to the run's configuration.
        #[arg(long, value_delimiter = ',')]
        leads: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rollout and evaluation over a grid of guidance scales and walk counts.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArg,
        #[command(flatten)]
        models: Models,
        #[arg(long, value_delimiter = ',')]
        omega: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        walks: Option<Vec<usize>>,
        #[arg(long)]
        solver: Option<Solver>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        members: Option<usize>,
        #[arg(long)]
        lead: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        leads: Option<Vec<usize>>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HEIGHTxWIDTH")?;
    Ok((h.parse().map_err(|e| format!("{e}"))?, w.parse().map_err(|e| format!("{e}"))?))
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        load_config(self.config.as_deref())
    }
}

impl Guidance {
    fn apply(self, cfg: &mut RunConfig) {
        set(&mut cfg.omega, self.omega);
        set(&mut cfg.walks, self.walks);
        set(&mut cfg.solver, self.solver);
        set(&mut cfg.solver_steps, self.steps);
    }
}

impl Models {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.start_index, self.start);
        set(&mut cfg.ensemble_seed, self.seed);
    }
}

fn clamp_leads(c: &mut RunConfig) {
    c.eval_leads.retain(|&l| l <= c.lead);
    if c.eval_leads.is_empty() {
        c.eval_leads.push(c.lead);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { cfg, out, steps, seed, grid } => {
            let mut c = cfg.load()?;
            set(&mut c.data_steps, steps);
            set(&mut c.data_seed, seed);
            if let Some((h, w)) = grid {
                c.height = h;
                c.width = w;
            }
            if c.train_states > c.data_steps {
                c.train_states = c.data_steps * 4 / 5;
            }
            generate_data(&c, &out)
        }
        Command::TrainForecaster { cfg, data, ckpt, epochs, lr } => {
            let mut c = cfg.load()?;
            set(&mut c.forecaster_epochs, epochs);
            set(&mut c.forecaster_lr, lr);
            let curve = train_forecaster_stage(&c, &data, &ckpt)?;
            eprintln!("final loss {:.6}", curve.last().copied().unwrap_or(f64::NAN));
            Ok(())
        }
        Command::TrainDiffusion { cfg, data, ckpt_f, ckpt, epochs, lr, cond_prob } => {
            let mut c = cfg.load()?;
            set(&mut c.diffusion_epochs, epochs);
            set(&mut c.diffusion_lr, lr);
            set(&mut c.cond_prob, cond_prob);
            let curve = train_diffusion_stage(&c, &data, &ckpt_f, &ckpt)?;
            eprintln!("final loss {:.6}", curve.last().copied().unwrap_or(f64::NAN));
            Ok(())
        }
        Command::Perturb { cfg, models, guidance, samples, out } => {
            let mut c = cfg.load()?;
            models.apply(&mut c);
            guidance.apply(&mut c);
            perturb_stage(&c, &models.data, &models.ckpt_f, &models.ckpt_d, samples, &out)
        }
        Command::Rollout { cfg, models, guidance, members, lead, perturb_first_only, out } => {
            let mut c = cfg.load()?;
            models.apply(&mut c);
            guidance.apply(&mut c);
            set(&mut c.members, members);
            set(&mut c.lead, lead);
            c.perturb_first_only |= perturb_first_only;
            clamp_leads(&mut c);
            let sidecar = rollout_stage(&c, &models.data, &models.ckpt_f, &models.ckpt_d, &out)?;
            if !sidecar.casualties.is_empty() {
                eprintln!("{} member(s) diverged", sidecar.casualties.len());
            }
            Ok(())
        }
        Command::Evaluate { run, truth, leads, out } => {
            let leads = match leads {
                Some(l) => l,
                None => {
                    let text = std::fs::read(sidecar_path(&run)).context("reading run sidecar")?;
                    let sidecar: RunSidecar = serde_json::from_slice(&text)?;
                    sidecar.config.eval_leads
                }
            };
            evaluate_stage(&run, &truth, &leads, &out).map(drop)
        }
        Command::Sweep { cfg, models, omega, walks, solver, steps, members, lead, leads, out_dir } => {
            let mut c = cfg.load()?;
            models.apply(&mut c);
            set(&mut c.sweep_omegas, omega);
            set(&mut c.sweep_walks, walks);
            set(&mut c.solver, solver);
            set(&mut c.solver_steps, steps);
            set(&mut c.members, members);
            set(&mut c.lead, lead);
            set(&mut c.eval_leads, leads);
            clamp_leads(&mut c);
            sweep_stage(&c, &models.data, &models.ckpt_f, &models.ckpt_d, &out_dir).map(drop)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}
