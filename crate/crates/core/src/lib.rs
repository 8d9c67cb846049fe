//! Diffusion-augmented ensemble forecasting.
//!
//! A deterministic autoregressive forecaster is paired with a conditional
//! denoising diffusion model that perturbs each state before it is advanced,
//! producing an ensemble whose spread is controlled by the classifier-free
//! guidance scale and the number of perturbation walks. The crate also
//! provides the synthetic advection–diffusion system used as ground truth and
//! the probabilistic verification metrics.

pub mod config;
pub mod diffusion;
pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod forecaster;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod seed;
pub mod train;

pub use error::{DefError, Result};
pub use grid::{FieldState, GridShape, NormStats};
