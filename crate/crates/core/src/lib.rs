//! Conditional denoising diffusion for inverse design of XY-symmetric binary
//! meta-atoms.
//!
//! A structure is a square binary occupancy grid with four-fold mirror
//! symmetry. The diffusion process runs on the upper-left quadrant in the
//! signed range `{-1, +1}`; a 55-element condition vector (52 transmission
//! samples plus three normalized layer parameters) steers generation through
//! classifier-free guidance. A seeded analytic surrogate solver labels the
//! synthetic dataset and scores generated structures, so the whole
//! train, generate, evaluate loop runs on a single CPU.

mod binio;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod grid;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod surrogate;
pub mod trainer;

pub use error::{Error, Result};
