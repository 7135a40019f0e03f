//! Seeded random streams.
//!
//! Every random draw in the crate comes from a `ChaCha8Rng` whose seed is
//! derived from a user seed plus stable keys, so parallel work units get
//! independent streams regardless of scheduling order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

/// 64-bit finalizer from SplitMix64; a bijection with good avalanche.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive combination of a seed and a sequence of keys.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(mix64(seed ^ 0x9e37_79b9_7f4a_7c15), |acc, &k| {
        mix64(acc.rotate_left(23) ^ mix64(k.wrapping_add(0x9e37_79b9_7f4a_7c15)))
    })
}

/// Stable digest of a float slice by bit pattern.
pub fn hash_f32s(values: &[f32]) -> u64 {
    let keys: Vec<u64> = values.iter().map(|v| u64::from(v.to_bits())).collect();
    derive_seed(values.len() as u64, &keys)
}

pub fn stream(seed: u64, keys: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, keys))
}

pub fn standard_normals(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}
