#![allow(dead_code)]

use metadiff::dataset::{generate, ConditionVector, Dataset};
use metadiff::denoiser::{DenoiserConfig, DenoiserModel};
use metadiff::surrogate::ProxyParams;

/// A few thousand parameters: enough structure to exercise every layer.
pub fn tiny_config(quadrant_side: usize, timesteps: usize) -> DenoiserConfig {
    DenoiserConfig {
        quadrant_side,
        channel_widths: vec![4, 8],
        bottleneck_dim: 8,
        time_embed_dim: 4,
        cond_embed_dim: 4,
        condition_len: metadiff::dataset::CONDITION_LEN,
        norm_groups: 2,
        timesteps,
    }
}

pub fn tiny_model(quadrant_side: usize, timesteps: usize, seed: u64) -> DenoiserModel<f32> {
    DenoiserModel::init(tiny_config(quadrant_side, timesteps), seed).unwrap()
}

pub fn proxy() -> ProxyParams {
    ProxyParams::new(7, metadiff::surrogate::DEFAULT_FEATURES).unwrap()
}

pub fn small_dataset(n: usize, side: usize, seed: u64) -> Dataset {
    generate(n, side, &proxy(), seed).unwrap()
}

pub fn conditions(ds: &Dataset, n: usize) -> Vec<ConditionVector> {
    ds.train.iter().take(n).map(|s| s.condition).collect()
}
