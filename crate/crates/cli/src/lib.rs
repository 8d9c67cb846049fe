//! Pipeline stages behind the `def` executable. Every stage writes a
//! config-echo JSON next to its primary output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use def_core::config::{file_hash, RunConfig};
use def_core::diffusion::{perturb, train_diffusion, DenoiserModel, DiffusionPerturber, GuidanceConfig};
use def_core::dynamics::generate_trajectory;
use def_core::ensemble::{run_ensemble, Casualty};
use def_core::forecaster::{train_forecaster, Forecaster};
use def_core::grid::{compute_stats, denormalize, make_windows, normalize, FieldState};
use def_core::io;
use def_core::metrics::{write_domain_csv, ScoreCard, Verification};

/// Reads a run configuration. Accepts either a plain config or a config-echo
/// file written by a previous command.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)?;
    if let Some(inner) = value.get_mut("config") {
        value = inner.take();
    }
    serde_json::from_value(value).with_context(|| format!("parsing config {}", path.display()))
}

pub fn echo_path(output: &Path) -> PathBuf {
    suffixed(output, ".config.json")
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(())
}

fn echo(command: &str, cfg: &RunConfig, inputs: &[&Path]) -> Result<serde_json::Value> {
    let inputs = inputs
        .iter()
        .map(|p| Ok(json!({ "path": p, "sha256": file_hash(p)? })))
        .collect::<Result<Vec<_>>>()?;
    Ok(json!({
        "command": command,
        "config_hash": cfg.hash(),
        "config": cfg,
        "inputs": inputs,
    }))
}

fn write_echo(output: &Path, command: &str, cfg: &RunConfig, inputs: &[&Path]) -> Result<()> {
    write_json(&echo_path(output), &echo(command, cfg, inputs)?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_curve(path: &Path, curve: &[f64]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "epoch,mse")?;
    for (e, l) in curve.iter().enumerate() {
        writeln!(w, "{},{l}", e + 1)?;
    }
    Ok(())
}

pub fn variable_names(vars: usize) -> Vec<String> {
    (0..vars).map(|v| format!("var{v}")).collect()
}

pub fn load_data(path: &Path) -> Result<Vec<FieldState>> {
    let (_, states) = io::load(path).with_context(|| format!("loading {}", path.display()))?;
    ensure!(!states.is_empty(), "{} holds no states", path.display());
    Ok(states)
}

fn check_grid(cfg: &RunConfig, data: &[FieldState]) -> Result<()> {
    let (want, got) = (cfg.dynamics().shape(), data[0].shape());
    ensure!(want == got, "data grid {got:?} does not match config {want:?}");
    Ok(())
}

pub fn generate_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let traj = generate_trajectory(&cfg.dynamics(), cfg.data_steps)?;
    io::save(out, &traj)?;
    write_echo(out, "generate-data", cfg, &[])
}

/// Trains the forecaster on the leading `train_states` of the data and
/// returns the loss curve.
pub fn train_forecaster_stage(cfg: &RunConfig, data: &Path, ckpt: &Path) -> Result<Vec<f64>> {
    cfg.validate()?;
    let traj = load_data(data)?;
    check_grid(cfg, &traj)?;
    ensure!(traj.len() >= cfg.train_states, "data has {} states, need {}", traj.len(), cfg.train_states);
    let train = &traj[..cfg.train_states];
    let stats = compute_stats(train, cfg.norm_epsilon)?;
    let norm = train.iter().map(|s| normalize(s, &stats)).collect::<Result<Vec<_>, _>>()?;
    let mut model = Forecaster::new(&cfg.forecaster_spec(), stats, cfg.dynamics(), cfg.residual, cfg.forecaster_seed)?;
    let curve = train_forecaster(&mut model, &make_windows(&norm, 1)?, &cfg.forecaster_train())?;
    model.save(ckpt)?;
    write_curve(&suffixed(ckpt, ".loss.csv"), &curve)?;
    write_echo(ckpt, "train-forecaster", cfg, &[data])?;
    Ok(curve)
}

pub fn train_diffusion_stage(cfg: &RunConfig, data: &Path, ckpt_f: &Path, ckpt: &Path) -> Result<Vec<f64>> {
    cfg.validate()?;
    let traj = load_data(data)?;
    check_grid(cfg, &traj)?;
    let forecaster = Forecaster::load(ckpt_f)?;
    let stats = forecaster.stats.clone();
    let train = &traj[..cfg.train_states.min(traj.len())];
    let norm = train.iter().map(|s| normalize(s, &stats)).collect::<Result<Vec<_>, _>>()?;
    let shape = cfg.dynamics().shape();
    let mut model = DenoiserModel::new(&cfg.denoiser_spec(), cfg.schedule()?, stats, shape, cfg.diffusion_seed)?;
    let report = train_diffusion(&mut model, &norm, &forecaster, &cfg.diffusion_train())?;
    model.save(ckpt)?;
    write_curve(&suffixed(ckpt, ".loss.csv"), &report.curve)?;
    let mut e = echo("train-diffusion", cfg, &[data, ckpt_f])?;
    e["samples"] = json!({
        "conditional": report.conditional,
        "unconditional": report.unconditional,
        "advanced": report.advanced,
    });
    write_json(&echo_path(ckpt), &e)?;
    Ok(report.curve)
}

fn initial_state(cfg: &RunConfig, data: &Path, forecaster: &Forecaster) -> Result<FieldState> {
    let traj = load_data(data)?;
    check_grid(cfg, &traj)?;
    let Some(x0) = traj.get(cfg.start_index) else {
        bail!("start_index {} beyond data length {}", cfg.start_index, traj.len());
    };
    Ok(normalize(x0, &forecaster.stats)?)
}

/// Applies `walks` chained perturbations to the state at `start_index` and
/// writes `samples` draws in physical units.
pub fn perturb_stage(cfg: &RunConfig, data: &Path, ckpt_f: &Path, ckpt_d: &Path, samples: usize, out: &Path) -> Result<()> {
    cfg.validate()?;
    ensure!(samples >= 1, "samples must be >= 1");
    let forecaster = Forecaster::load(ckpt_f)?;
    let model = DenoiserModel::load(ckpt_d)?;
    let x0 = initial_state(cfg, data, &forecaster)?;
    let draws = (0..samples)
        .map(|i| {
            let p = perturb(&model, &x0, &cfg.guidance(), def_core::seed::derive(cfg.ensemble_seed, i as u64))?;
            Ok(denormalize(&p, &forecaster.stats)?)
        })
        .collect::<Result<Vec<_>>>()?;
    io::save(out, &draws)?;
    write_echo(out, "perturb", cfg, &[data, ckpt_f, ckpt_d])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberInfo {
    pub index: usize,
    pub seed: u64,
}

/// Written next to every rollout as `<run>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSidecar {
    pub command: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub label: String,
    pub start_index: usize,
    pub lead: usize,
    pub variables: Vec<String>,
    /// Members stored in the run file, in order.
    pub members: Vec<MemberInfo>,
    pub casualties: Vec<Casualty>,
    /// File name of the deterministic rollout, relative to the run file.
    pub deterministic: String,
    pub inputs: serde_json::Value,
}

pub fn sidecar_path(run: &Path) -> PathBuf {
    suffixed(run, ".json")
}

fn det_path(run: &Path) -> PathBuf {
    run.with_extension("det.def1")
}

/// Ensemble rollout from `start_index`. The run file holds the surviving
/// members' states at leads `1..=lead`, member-major, in physical units.
pub fn rollout_stage(cfg: &RunConfig, data: &Path, ckpt_f: &Path, ckpt_d: &Path, out: &Path) -> Result<RunSidecar> {
    cfg.validate()?;
    let forecaster = Forecaster::load(ckpt_f)?;
    let model = DenoiserModel::load(ckpt_d)?;
    let x0 = initial_state(cfg, data, &forecaster)?;
    let perturber = DiffusionPerturber { model: &model, cfg: cfg.guidance() };
    let run = run_ensemble(&x0, &forecaster, &perturber, &cfg.ensemble())?;
    ensure!(!run.members.is_empty(), "every member diverged");
    let states: Vec<FieldState> = run.denormalized(&forecaster.stats)?.into_iter().flatten().collect();
    io::save(out, &states)?;
    let det = forecaster
        .rollout(&x0, cfg.lead)?
        .iter()
        .map(|s| denormalize(s, &forecaster.stats))
        .collect::<Result<Vec<_>, _>>()?;
    let det_file = det_path(out);
    io::save(&det_file, &det)?;
    let e = echo("rollout", cfg, &[data, ckpt_f, ckpt_d])?;
    let sidecar = RunSidecar {
        command: "rollout".into(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        label: cfg.guidance().label(),
        start_index: cfg.start_index,
        lead: cfg.lead,
        variables: variable_names(cfg.vars),
        members: run.members.iter().map(|m| MemberInfo { index: m.index, seed: m.seed }).collect(),
        casualties: run.casualties.clone(),
        deterministic: det_file.file_name().unwrap().to_string_lossy().into_owned(),
        inputs: e["inputs"].clone(),
    };
    write_json(&sidecar_path(out), &sidecar)?;
    Ok(sidecar)
}

/// Scores a rollout against the truth trajectory. Writes the scorecard CSV
/// and a domain-average CSV next to it.
pub fn evaluate_stage(run: &Path, truth: &Path, leads: &[usize], out: &Path) -> Result<ScoreCard> {
    let sidecar: RunSidecar = serde_json::from_slice(
        &std::fs::read(sidecar_path(run)).with_context(|| format!("reading sidecar of {}", run.display()))?,
    )?;
    let (_, states) = io::load(run)?;
    let b = sidecar.members.len();
    ensure!(states.len() == b * sidecar.lead, "run holds {} states, sidecar implies {}", states.len(), b * sidecar.lead);
    let members: Vec<Vec<FieldState>> = states.chunks(sidecar.lead).map(<[_]>::to_vec).collect();
    let det_file = run.parent().unwrap_or(Path::new(".")).join(&sidecar.deterministic);
    let (_, det) = io::load(&det_file)?;
    let truth_all = load_data(truth)?;
    let first = sidecar.start_index + 1;
    ensure!(
        truth_all.len() >= first + sidecar.lead,
        "truth has {} states, need {}",
        truth_all.len(),
        first + sidecar.lead
    );
    let truth_slice = &truth_all[first..first + sidecar.lead];
    let v = Verification { members: &members, deterministic: &det, truth: truth_slice, variables: &sidecar.variables };
    let card = v.scorecard(leads, &sidecar.label)?;
    card.write_csv(create(out)?)?;
    write_domain_csv(&v.domain_averages()?, create(&out.with_extension("domain.csv"))?)?;
    let mut cfg = sidecar.config.clone();
    cfg.eval_leads = leads.to_vec();
    let mut e = echo("evaluate", &cfg, &[run, truth])?;
    e["label"] = json!(sidecar.label);
    write_json(&echo_path(out), &e)?;
    Ok(card)
}

pub const SWEEP_HEADER: &str = "label,omega,walks,variable,lead,energy,crps,rmse,spread_corr,det_rmse,spread";

/// Rollout and evaluation for every `(omega, walks)` cell. Writes one
/// scorecard per cell and a merged `sweep.csv` into `out_dir`.
pub fn sweep_stage(cfg: &RunConfig, data: &Path, ckpt_f: &Path, ckpt_d: &Path, out_dir: &Path) -> Result<Vec<(GuidanceConfig, ScoreCard)>> {
    cfg.validate()?;
    ensure!(!cfg.sweep_omegas.is_empty() && !cfg.sweep_walks.is_empty(), "sweep grid is empty");
    std::fs::create_dir_all(out_dir)?;
    let mut cards = Vec::new();
    for &omega in &cfg.sweep_omegas {
        for &walks in &cfg.sweep_walks {
            let cell = RunConfig { omega, walks, ..cfg.clone() };
            let stem = format!("omega{omega}_walks{walks}");
            let run = out_dir.join(format!("{stem}.def1"));
            rollout_stage(&cell, data, ckpt_f, ckpt_d, &run)?;
            let card = evaluate_stage(&run, data, &cfg.eval_leads, &out_dir.join(format!("{stem}.csv")))?;
            cards.push((cell.guidance(), card));
        }
    }
    let merged = out_dir.join("sweep.csv");
    let mut w = create(&merged)?;
    writeln!(w, "{SWEEP_HEADER}")?;
    for (g, card) in &cards {
        for r in &card.rows {
            writeln!(
                w,
                "\"{}\",{},{},{},{},{},{},{},{},{},{}",
                card.label, g.omega, g.walks, r.variable, r.lead, r.energy, r.crps, r.rmse, r.spread_corr, r.det_rmse, r.spread
            )?;
        }
    }
    w.flush()?;
    write_echo(&merged, "sweep", cfg, &[data, ckpt_f, ckpt_d])?;
    Ok(cards)
}
