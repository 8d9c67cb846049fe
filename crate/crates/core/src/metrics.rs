//! Verification scores for ensembles and single forecasts, and the per-lead
//! scorecard built from them.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, DefError, Result};
use crate::grid::FieldState;

fn check_ensemble<M: AsRef<[f64]>>(members: &[M], obs: &[f64]) -> Result<()> {
    if members.is_empty() {
        return Err(DefError::Empty("ensemble"));
    }
    for m in members {
        if m.as_ref().len() != obs.len() {
            return Err(shape_err(obs.len(), m.as_ref().len()));
        }
    }
    Ok(())
}

/// CRPS of a scalar ensemble. The pairwise term uses the sorted-sample
/// identity `sum_{b,b'} |x_b - x_b'| = 2 sum_i (2i - B - 1) x_(i)`.
pub fn crps_scalar(members: &[f64], obs: f64) -> Result<f64> {
    if members.is_empty() {
        return Err(DefError::Empty("ensemble"));
    }
    let b = members.len() as f64;
    let mut sorted = members.to_vec();
    sorted.sort_by(f64::total_cmp);
    let skill: f64 = sorted.iter().map(|x| (x - obs).abs()).sum::<f64>() / b;
    let pair: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * (i + 1) as f64 - b - 1.0) * x)
        .sum::<f64>()
        * 2.0;
    Ok(skill - pair / (2.0 * b * b))
}

/// Mean over grid points of the pointwise CRPS.
pub fn crps<M: AsRef<[f64]>>(members: &[M], obs: &[f64]) -> Result<f64> {
    check_ensemble(members, obs)?;
    if obs.is_empty() {
        return Err(DefError::Empty("field"));
    }
    let mut column = vec![0.0; members.len()];
    let mut total = 0.0;
    for (p, o) in obs.iter().enumerate() {
        for (c, m) in column.iter_mut().zip(members) {
            *c = m.as_ref()[p];
        }
        total += crps_scalar(&column, *o)?;
    }
    Ok(total / obs.len() as f64)
}

fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Energy score with Euclidean norms over the flattened field.
pub fn energy_score<M: AsRef<[f64]>>(members: &[M], obs: &[f64]) -> Result<f64> {
    check_ensemble(members, obs)?;
    let b = members.len() as f64;
    let skill: f64 = members.iter().map(|m| l2_dist(m.as_ref(), obs)).sum::<f64>() / b;
    let mut pair = 0.0;
    for (i, a) in members.iter().enumerate() {
        for c in &members[i + 1..] {
            pair += l2_dist(a.as_ref(), c.as_ref());
        }
    }
    Ok(skill - 2.0 * pair / (2.0 * b * b))
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(shape_err(truth.len(), pred.len()));
    }
    if pred.is_empty() {
        return Err(DefError::Empty("field"));
    }
    let mse = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64;
    Ok(mse.sqrt())
}

/// Pointwise ensemble mean and population standard deviation.
pub fn mean_and_spread<M: AsRef<[f64]>>(members: &[M]) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = members.first().ok_or(DefError::Empty("ensemble"))?.as_ref();
    check_ensemble(members, first)?;
    let b = members.len() as f64;
    let mut mean = vec![0.0; first.len()];
    for m in members {
        for (a, v) in mean.iter_mut().zip(m.as_ref()) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|a| *a /= b);
    let mut var = vec![0.0; first.len()];
    for m in members {
        for ((a, v), mu) in var.iter_mut().zip(m.as_ref()).zip(&mean) {
            *a += (v - mu) * (v - mu);
        }
    }
    let spread = var.into_iter().map(|v| (v / b).sqrt()).collect();
    Ok((mean, spread))
}

/// `‖ |pred - obs| - spread ‖_2` with the spread taken pointwise over members.
pub fn spread_correlation<M: AsRef<[f64]>>(members: &[M], obs: &[f64], pred: &[f64]) -> Result<f64> {
    check_ensemble(members, obs)?;
    if pred.len() != obs.len() {
        return Err(shape_err(obs.len(), pred.len()));
    }
    let (_, spread) = mean_and_spread(members)?;
    Ok(pred
        .iter()
        .zip(obs)
        .zip(&spread)
        .map(|((p, o), s)| {
            let d = (p - o).abs() - s;
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

pub fn domain_average(field: &[f64]) -> Result<f64> {
    if field.is_empty() {
        return Err(DefError::Empty("field"));
    }
    Ok(field.iter().sum::<f64>() / field.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub variable: String,
    pub lead: usize,
    pub energy: f64,
    pub crps: f64,
    pub rmse: f64,
    pub spread_corr: f64,
    pub det_rmse: f64,
    /// Domain-mean ensemble spread.
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCard {
    pub label: String,
    pub rows: Vec<ScoreRow>,
}

pub const SCORECARD_HEADER: &str = "variable,lead,energy,crps,rmse,spread_corr,det_rmse";

impl ScoreCard {
    pub fn row(&self, variable: &str, lead: usize) -> Option<&ScoreRow> {
        self.rows.iter().find(|r| r.variable == variable && r.lead == lead)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{SCORECARD_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.variable, r.lead, r.energy, r.crps, r.rmse, r.spread_corr, r.det_rmse
            )?;
        }
        Ok(())
    }
}

/// Forecasts and truth in physical units, indexed by lead: `members[b][n]`,
/// `deterministic[n]` and `truth[n]` all correspond to lead `n + 1`.
pub struct Verification<'a> {
    pub members: &'a [Vec<FieldState>],
    pub deterministic: &'a [FieldState],
    pub truth: &'a [FieldState],
    pub variables: &'a [String],
}

impl Verification<'_> {
    fn lead_len(&self) -> usize {
        self.members
            .iter()
            .map(Vec::len)
            .chain([self.deterministic.len(), self.truth.len()])
            .min()
            .unwrap_or(0)
    }

    fn check_lead(&self, lead: usize) -> Result<()> {
        let len = self.lead_len();
        if lead == 0 || lead > len {
            return Err(DefError::OutOfRange { index: lead, len });
        }
        Ok(())
    }

    /// Scores every `(lead, variable)` pair; leads are 1-based.
    pub fn scorecard(&self, leads: &[usize], label: &str) -> Result<ScoreCard> {
        if self.members.is_empty() {
            return Err(DefError::Empty("ensemble"));
        }
        let mut rows = Vec::with_capacity(leads.len() * self.variables.len());
        for &lead in leads {
            self.check_lead(lead)?;
            let n = lead - 1;
            let truth = &self.truth[n];
            if truth.vars() != self.variables.len() {
                return Err(shape_err(self.variables.len(), truth.vars()));
            }
            for (v, name) in self.variables.iter().enumerate() {
                let fields: Vec<&[f64]> = self.members.iter().map(|m| m[n].channel(v)).collect();
                let obs = truth.channel(v);
                let (mean, spread) = mean_and_spread(&fields)?;
                rows.push(ScoreRow {
                    variable: name.clone(),
                    lead,
                    energy: energy_score(&fields, obs)?,
                    crps: crps(&fields, obs)?,
                    rmse: rmse(&mean, obs)?,
                    spread_corr: spread_correlation(&fields, obs, &mean)?,
                    det_rmse: rmse(self.deterministic[n].channel(v), obs)?,
                    spread: domain_average(&spread)?,
                });
            }
        }
        Ok(ScoreCard { label: label.to_string(), rows })
    }

    /// Domain averages per lead and variable: truth, deterministic forecast,
    /// ensemble mean, and the smallest and largest member.
    pub fn domain_averages(&self) -> Result<Vec<DomainAverageRow>> {
        let mut out = Vec::new();
        for n in 0..self.lead_len() {
            for (v, name) in self.variables.iter().enumerate() {
                let per_member: Vec<f64> = self
                    .members
                    .iter()
                    .map(|m| domain_average(m[n].channel(v)))
                    .collect::<Result<_>>()?;
                out.push(DomainAverageRow {
                    variable: name.clone(),
                    lead: n + 1,
                    truth: domain_average(self.truth[n].channel(v))?,
                    deterministic: domain_average(self.deterministic[n].channel(v))?,
                    ensemble_mean: domain_average(&per_member)?,
                    member_min: per_member.iter().copied().fold(f64::INFINITY, f64::min),
                    member_max: per_member.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                });
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainAverageRow {
    pub variable: String,
    pub lead: usize,
    pub truth: f64,
    pub deterministic: f64,
    pub ensemble_mean: f64,
    pub member_min: f64,
    pub member_max: f64,
}

pub fn write_domain_csv<W: Write>(rows: &[DomainAverageRow], mut w: W) -> Result<()> {
    writeln!(w, "variable,lead,truth,deterministic,ensemble_mean,member_min,member_max")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.variable, r.lead, r.truth, r.deterministic, r.ensemble_mean, r.member_min, r.member_max
        )?;
    }
    Ok(())
}
