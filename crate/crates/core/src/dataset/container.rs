//! Dataset container.
//!
//! ```text
//! "MDIF"                  magic
//! u32                     format version
//! u64 + bytes             manifest as canonical JSON
//! u64                     CRC-64/XZ of the bytes above
//! three split blocks, in train, val, test order:
//!   u64                   sample count n
//!   n * m * m f32         quadrants, row-major, values 0 or 1
//!   n * 55 f32            conditions
//!   u64                   CRC-64/XZ of the block
//! ```
//! All numbers are little-endian; `m` is half the manifest's grid side.

use std::path::Path;

use super::{ConditionVector, Dataset, DatasetManifest, Sample, Split, CONDITION_LEN};
use crate::binio::{canonical_json, crc64, Reader, Writer};
use crate::error::{Error, Result};
use crate::grid::{Domain, QuadrantGrid};

pub const DATASET_MAGIC: &[u8; 4] = b"MDIF";
pub const DATASET_VERSION: u32 = 1;
pub const DATASET_FILE: &str = "dataset.mdif";
pub const MANIFEST_FILE: &str = "manifest.json";

impl Dataset {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        w.blob(&canonical_json(&self.manifest)?);
        let crc = crc64(&w.buf);
        w.u64(crc);
        for split in Split::ALL {
            let start = w.buf.len();
            let samples = self.split(split);
            w.u64(samples.len() as u64);
            for s in samples {
                w.f32s(s.quadrant.values().iter().map(|&v| v as f32));
            }
            for s in samples {
                w.f32s(s.condition.values().iter().copied());
            }
            let crc = crc64(&w.buf[start..]);
            w.u64(crc);
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "dataset");
        if r.take(4).ok() != Some(&DATASET_MAGIC[..]) {
            return Err(r.corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let manifest_bytes = r.blob()?;
        let header_end = r.pos();
        if r.u64()? != crc64(&bytes[..header_end]) {
            return Err(r.corrupt("header checksum mismatch"));
        }
        let manifest: DatasetManifest =
            serde_json::from_slice(manifest_bytes).map_err(|e| r.corrupt(format!("manifest: {e}")))?;
        if manifest.grid_side < 2 || manifest.grid_side % 2 != 0 {
            return Err(r.corrupt(format!("grid side {} is not even", manifest.grid_side)));
        }
        let m = manifest.quadrant_side();

        let mut splits = Vec::with_capacity(3);
        for split in Split::ALL {
            let start = r.pos();
            let n = r.u64()? as usize;
            if n != manifest.counts.get(split) {
                return Err(r.corrupt(format!(
                    "{split} block holds {n} samples, manifest says {}",
                    manifest.counts.get(split)
                )));
            }
            let grids = r.f32s(n.checked_mul(m * m).ok_or_else(|| r.corrupt("count overflow"))?)?;
            let conds = r.f32s(n * CONDITION_LEN)?;
            let end = r.pos();
            if r.u64()? != crc64(&bytes[start..end]) {
                return Err(r.corrupt(format!("{split} block checksum mismatch")));
            }
            let samples = grids
                .chunks(m * m)
                .zip(conds.chunks(CONDITION_LEN))
                .map(|(g, c)| {
                    let quadrant = QuadrantGrid::new(m, g.iter().map(|&v| f64::from(v)).collect(), Domain::Binary01)
                        .map_err(|e| r.corrupt(format!("{split} grid: {e}")))?;
                    let condition =
                        ConditionVector::from_slice(c).map_err(|e| r.corrupt(format!("{split} condition: {e}")))?;
                    Ok(Sample { quadrant, condition })
                })
                .collect::<Result<Vec<_>>>()?;
            splits.push(samples);
        }
        if !r.is_done() {
            return Err(r.corrupt("trailing bytes"));
        }
        let test = splits.pop().unwrap_or_default();
        let val = splits.pop().unwrap_or_default();
        let train = splits.pop().unwrap_or_default();
        Ok(Self {
            manifest,
            train,
            val,
            test,
        })
    }

    /// Writes the container and a pretty-printed manifest into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(DATASET_FILE), self.to_bytes()?)?;
        let mut manifest = serde_json::to_vec_pretty(&serde_json::to_value(&self.manifest)?)?;
        manifest.push(b'\n');
        std::fs::write(dir.join(MANIFEST_FILE), manifest)?;
        Ok(())
    }
}
