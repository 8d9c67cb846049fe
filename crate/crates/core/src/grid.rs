//! Gridded field states, per-variable normalization and training windows.
//!
//! A [`FieldState`] stores `vars` physical channels followed by `forcings`
//! auxiliary channels, each a row-major `height × width` plane.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, DefError, Result};

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FieldState {
    vars: usize,
    forcings: usize,
    height: usize,
    width: usize,
    pub time_index: u64,
    data: Vec<f64>,
}

/// Channel layout shared by every state of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub vars: usize,
    pub forcings: usize,
    pub height: usize,
    pub width: usize,
}

impl GridShape {
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channels(&self) -> usize {
        self.vars + self.forcings
    }

    pub fn len(&self) -> usize {
        self.channels() * self.plane()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for GridShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "(v={}, f={}, h={}, w={})",
            self.vars, self.forcings, self.height, self.width
        )
    }
}

impl FieldState {
    pub fn new(shape: GridShape, time_index: u64, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(shape_err(shape.len(), data.len()));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(DefError::NonFinite(format!("field state t={time_index}")));
        }
        Ok(Self {
            vars: shape.vars,
            forcings: shape.forcings,
            height: shape.height,
            width: shape.width,
            time_index,
            data,
        })
    }

    pub fn zeros(shape: GridShape, time_index: u64) -> Self {
        Self {
            vars: shape.vars,
            forcings: shape.forcings,
            height: shape.height,
            width: shape.width,
            time_index,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn shape(&self) -> GridShape {
        GridShape {
            vars: self.vars,
            forcings: self.forcings,
            height: self.height,
            width: self.width,
        }
    }

    pub fn vars(&self) -> usize {
        self.vars
    }

    pub fn forcings(&self) -> usize {
        self.forcings
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn physical(&self) -> &[f64] {
        &self.data[..self.vars * self.plane_len()]
    }

    pub fn forcing(&self) -> &[f64] {
        &self.data[self.vars * self.plane_len()..]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Replaces the physical channels, leaving forcing channels untouched.
    pub fn with_physical(&self, physical: &[f64]) -> Result<Self> {
        let n = self.vars * self.plane_len();
        if physical.len() != n {
            return Err(shape_err(n, physical.len()));
        }
        if physical.iter().any(|x| !x.is_finite()) {
            return Err(DefError::NonFinite(format!(
                "physical channels at t={}",
                self.time_index
            )));
        }
        let mut out = self.clone();
        out.data[..n].copy_from_slice(physical);
        Ok(out)
    }

    /// Replaces the forcing channels and time index.
    pub fn with_forcing(&self, time_index: u64, forcing: &[f64]) -> Result<Self> {
        let n = self.vars * self.plane_len();
        if forcing.len() != self.data.len() - n {
            return Err(shape_err(self.data.len() - n, forcing.len()));
        }
        let mut out = self.clone();
        out.time_index = time_index;
        out.data[n..].copy_from_slice(forcing);
        Ok(out)
    }

    /// Copy containing only the physical channels (`forcings == 0`).
    pub fn physical_only(&self) -> Self {
        Self {
            vars: self.vars,
            forcings: 0,
            height: self.height,
            width: self.width,
            time_index: self.time_index,
            data: self.physical().to_vec(),
        }
    }
}

/// Per-variable mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub epsilon: f64,
}

impl NormStats {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>, epsilon: f64) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(shape_err(mu.len(), sigma.len()));
        }
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(DefError::InvalidConfig(format!("epsilon {epsilon} must be >= 0")));
        }
        if sigma.iter().any(|s| !(*s >= 0.0 && s.is_finite())) || mu.iter().any(|m| !m.is_finite())
        {
            return Err(DefError::InvalidConfig("sigma must be finite and >= 0".into()));
        }
        Ok(Self { mu, sigma, epsilon })
    }

    pub fn vars(&self) -> usize {
        self.mu.len()
    }

    fn check(&self, x: &FieldState) -> Result<()> {
        if x.vars() != self.vars() {
            return Err(shape_err(
                format!("{} variables", self.vars()),
                format!("{} variables", x.vars()),
            ));
        }
        Ok(())
    }

    fn scale(&self, v: usize) -> Result<f64> {
        let s = self.sigma[v] + self.epsilon;
        if s > 0.0 {
            Ok(s)
        } else {
            Err(DefError::InvalidConfig(format!(
                "variable {v} has sigma + epsilon = 0"
            )))
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let stats: NormStats = serde_json::from_slice(&std::fs::read(path)?)?;
        Self::new(stats.mu, stats.sigma, stats.epsilon)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Pooled population statistics of every physical variable over all grid
/// points of all states.
pub fn compute_stats(dataset: &[FieldState], epsilon: f64) -> Result<NormStats> {
    let first = dataset.first().ok_or(DefError::Empty("dataset"))?;
    let shape = first.shape();
    if let Some(bad) = dataset.iter().find(|s| s.shape() != shape) {
        return Err(shape_err(shape, bad.shape()));
    }
    let n = (shape.plane() * dataset.len()) as f64;
    let mut mu = vec![0.0; shape.vars];
    let mut sigma = vec![0.0; shape.vars];
    for v in 0..shape.vars {
        let sum: f64 = dataset.iter().flat_map(|s| s.channel(v)).sum();
        let mean = sum / n;
        let sq: f64 = dataset
            .iter()
            .flat_map(|s| s.channel(v))
            .map(|x| (x - mean) * (x - mean))
            .sum();
        mu[v] = mean;
        sigma[v] = (sq / n).sqrt();
    }
    NormStats::new(mu, sigma, epsilon)
}

pub fn normalize(x: &FieldState, stats: &NormStats) -> Result<FieldState> {
    stats.check(x)?;
    if !x.is_finite() {
        return Err(DefError::NonFinite(format!("normalize input t={}", x.time_index)));
    }
    let mut out = x.clone();
    let n = x.plane_len();
    for v in 0..x.vars() {
        let scale = stats.scale(v)?;
        let mu = stats.mu[v];
        for val in &mut out.data[v * n..(v + 1) * n] {
            *val = (*val - mu) / scale;
        }
    }
    Ok(out)
}

/// Inverse of [`normalize`]: multiplies by `sigma + epsilon` so the round trip
/// is exact up to rounding.
pub fn denormalize(y: &FieldState, stats: &NormStats) -> Result<FieldState> {
    stats.check(y)?;
    let mut out = y.clone();
    let n = y.plane_len();
    for v in 0..y.vars() {
        let scale = stats.sigma[v] + stats.epsilon;
        let mu = stats.mu[v];
        for val in &mut out.data[v * n..(v + 1) * n] {
            *val = *val * scale + mu;
        }
    }
    if !out.is_finite() {
        return Err(DefError::NonFinite(format!("denormalize output t={}", y.time_index)));
    }
    Ok(out)
}

/// Input/target pairs `(x_t, x_{t+horizon})`; targets keep physical channels only.
pub fn make_windows(
    dataset: &[FieldState],
    horizon: usize,
) -> Result<Vec<(FieldState, FieldState)>> {
    if horizon == 0 {
        return Err(DefError::InvalidConfig("horizon must be >= 1".into()));
    }
    if dataset.len() < horizon + 1 {
        return Err(DefError::Empty("dataset shorter than horizon + 1"));
    }
    for pair in dataset.windows(2) {
        if pair[1].time_index != pair[0].time_index + 1 {
            return Err(DefError::InvalidConfig(format!(
                "dataset not unit-stride at t={}",
                pair[0].time_index
            )));
        }
        if pair[1].shape() != pair[0].shape() {
            return Err(shape_err(pair[0].shape(), pair[1].shape()));
        }
    }
    Ok(dataset
        .iter()
        .zip(&dataset[horizon..])
        .map(|(x, y)| (x.clone(), y.physical_only()))
        .collect())
}
