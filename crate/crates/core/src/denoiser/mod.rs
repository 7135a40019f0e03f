//! The noise-prediction network, its exact gradients, and checkpoint files.

pub mod checkpoint;
pub mod layers;
mod model;
pub mod real;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use model::{embed_time, DenoiserConfig, DenoiserModel};
pub use real::Real;
