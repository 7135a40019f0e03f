//! Condition vectors, synthetic dataset generation and the on-disk container.

mod container;
mod generate;

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ExtraParams, QuadrantGrid};
use crate::surrogate::{ProxySpec, SpectralResponse, FREQUENCY_POINTS};

pub use container::{DATASET_FILE, DATASET_MAGIC, DATASET_VERSION, MANIFEST_FILE};
pub use generate::{draw_quadrant, generate, generate_dataset, majority_smooth, FILL_RANGE};

/// Index ranges of the condition vector. Every consumer reads the layout from here.
pub mod layout {
    use std::ops::Range;

    pub const RE: Range<usize> = 0..26;
    pub const IM: Range<usize> = 26..52;
    pub const SPECTRAL: Range<usize> = 0..52;
    pub const EXTRAS: Range<usize> = 52..55;
    pub const W1: usize = 52;
    pub const H2: usize = 53;
    pub const N2: usize = 54;
}

pub const SPECTRAL_LEN: usize = 2 * FREQUENCY_POINTS;
pub const CONDITION_LEN: usize = SPECTRAL_LEN + 3;

/// The reserved condition fed to the network for unconditional predictions.
pub const UNCONDITIONAL: [f32; CONDITION_LEN] = [0.0; CONDITION_LEN];

/// Added at [`layout::N2`] when a real condition would otherwise equal [`UNCONDITIONAL`].
pub const MASK_NUDGE: f32 = 1e-9;

const _: () = assert!(layout::SPECTRAL.end == SPECTRAL_LEN && layout::EXTRAS.end == CONDITION_LEN);

/// Target for generation: 52 spectral samples then normalized W1, H2, N2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionVector([f32; CONDITION_LEN]);

impl ConditionVector {
    pub fn new(values: [f32; CONDITION_LEN]) -> Result<Self> {
        if values == UNCONDITIONAL {
            return Err(Error::ReservedCondition);
        }
        let check = |range: Range<usize>, lo: f32, hi: f32, field: &'static str| {
            for &v in &values[range] {
                if !(v >= lo && v <= hi) {
                    return Err(Error::OutOfRange {
                        field,
                        value: f64::from(v),
                        lo: f64::from(lo),
                        hi: f64::from(hi),
                    });
                }
            }
            Ok(())
        };
        check(layout::SPECTRAL, -1.0, 1.0, "spectral")?;
        check(layout::EXTRAS, 0.0, 1.0, "normalized extras")?;
        Ok(Self(values))
    }

    pub fn from_slice(values: &[f32]) -> Result<Self> {
        let arr: [f32; CONDITION_LEN] = values.try_into().map_err(|_| Error::LengthMismatch {
            expected: CONDITION_LEN,
            actual: values.len(),
        })?;
        Self::new(arr)
    }

    /// Assembles a condition from a response and already-normalized extras.
    pub fn from_parts(resp: &SpectralResponse, normalized: [f32; 3]) -> Result<Self> {
        let mut v = [0.0f32; CONDITION_LEN];
        v[layout::RE].copy_from_slice(&resp.re);
        v[layout::IM].copy_from_slice(&resp.im);
        v[layout::EXTRAS].copy_from_slice(&normalized);
        if v == UNCONDITIONAL {
            v[layout::N2] = MASK_NUDGE;
        }
        Self::new(v)
    }

    pub fn values(&self) -> &[f32; CONDITION_LEN] {
        &self.0
    }

    pub fn spectral(&self) -> Vec<f64> {
        self.0[layout::SPECTRAL].iter().map(|&v| f64::from(v)).collect()
    }

    pub fn response(&self) -> SpectralResponse {
        SpectralResponse::from_slice(&self.0[layout::SPECTRAL]).expect("layout has 52 spectral entries")
    }

    pub fn normalized_extras(&self) -> [f64; 3] {
        let e = &self.0[layout::EXTRAS];
        [f64::from(e[0]), f64::from(e[1]), f64::from(e[2])]
    }

    /// Layer parameters in physical units.
    pub fn extras(&self) -> ExtraParams {
        ExtraParams::from_normalized(self.normalized_extras())
    }
}

/// Min-max normalization of the layer parameters onto `[0, 1]`.
pub fn normalize_extras(e: &ExtraParams) -> Result<[f64; 3]> {
    e.normalized()
}

/// Concatenates a response with normalized extras, rounding to `f32`.
pub fn make_condition(resp: &SpectralResponse, e: &ExtraParams) -> Result<ConditionVector> {
    let n = normalize_extras(e)?;
    ConditionVector::from_parts(resp, [n[0] as f32, n[1] as f32, n[2] as f32])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config("split", format!("`{other}` is not one of train, val, test"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    /// 8:1:1 split; validation and test each get `floor(n / 10)`.
    pub fn for_total(n: usize) -> Self {
        let tenth = n / 10;
        Self {
            train: n - 2 * tenth,
            val: tenth,
            test: tenth,
        }
    }

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtraRanges {
    pub w1: (f64, f64),
    pub h2: (f64, f64),
    pub n2: (f64, f64),
}

impl Default for ExtraRanges {
    fn default() -> Self {
        Self {
            w1: ExtraParams::W1_RANGE,
            h2: ExtraParams::H2_RANGE,
            n2: ExtraParams::N2_RANGE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub grid_side: usize,
    pub counts: SplitCounts,
    pub split_ratio: [u32; 3],
    pub proxy: ProxySpec,
    pub extra_ranges: ExtraRanges,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn quadrant_side(&self) -> usize {
        self.grid_side / 2
    }
}

/// A binary quadrant with the condition it was labeled with.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub quadrant: QuadrantGrid,
    pub condition: ConditionVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Quadrants mapped to `{-1, +1}` with their conditions.
    pub fn signed_split(&self, split: Split) -> Result<Vec<(QuadrantGrid, ConditionVector)>> {
        self.split(split)
            .iter()
            .map(|s| Ok((s.quadrant.to_signed()?, s.condition)))
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = if path.is_dir() { path.join(DATASET_FILE) } else { path.to_path_buf() };
        Self::from_bytes(&std::fs::read(file)?)
    }
}

/// Signed quadrants and conditions of one split, in stored order.
pub fn load_split(path: impl AsRef<Path>, split: Split) -> Result<Vec<(QuadrantGrid, ConditionVector)>> {
    Dataset::load(path)?.signed_split(split)
}
