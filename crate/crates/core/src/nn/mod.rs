//! Minimal differentiable network stack with hand-written reverse-mode
//! gradients.

pub mod attention;
pub mod checkpoint;
pub mod embed;
pub mod gemm;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod unet;

pub use embed::time_embedding;
pub use optim::{clip_and_step, Adam, AdamConfig, ClipReport};
pub use params::{ParamRange, ParamStore};
pub use tensor::Slab;
pub use unet::{Activation, NetSpec, Network, Stage};

#[cfg(test)]
mod gradcheck;
