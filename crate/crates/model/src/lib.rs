//! Conditional diffusion model generating continuous gaze sequences on 360°
//! panoramas.

pub mod denoiser;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod model;
pub mod nn;

pub use error::{ModelError, Result};
pub use model::{GazeDiffusion, ModelConfig, Trainer, TrainingSet};
