//! Self-describing checkpoint file.
//!
//! ```text
//! "MDCK"                      magic
//! u32                         format version
//! u64 + bytes                 canonical JSON header {denoiser, meta}
//! u32 T, f64 beta_1, f64 beta_T   schedule
//! u32                         tensor count
//! per tensor: u16 name length, name (utf-8), u8 rank, u32 dims..., f32 data
//! u64                         CRC-64/XZ of every preceding byte
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{DenoiserConfig, DenoiserModel};
use crate::binio::{canonical_json, crc64, Reader, Writer};
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::surrogate::ProxySpec;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Context a checkpoint needs to be used on its own: the full grid side it
/// generates and the surrogate it was validated against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub grid_side: usize,
    pub proxy: Option<ProxySpec>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    denoiser: DenoiserConfig,
    meta: CheckpointMeta,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: DenoiserModel<f32>,
    pub schedule: NoiseSchedule,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(model: DenoiserModel<f32>, schedule: NoiseSchedule, meta: CheckpointMeta) -> Result<Self> {
        if model.config().timesteps != schedule.len() {
            return Err(Error::ScheduleMismatch {
                model: model.config().timesteps,
                schedule: schedule.len(),
            });
        }
        if meta.grid_side != 2 * model.config().quadrant_side {
            return Err(Error::config(
                "grid_side",
                format!(
                    "{} is not twice the model's quadrant side {}",
                    meta.grid_side,
                    model.config().quadrant_side
                ),
            ));
        }
        Ok(Self { model, schedule, meta })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.blob(&canonical_json(&Header {
            denoiser: self.model.config().clone(),
            meta: self.meta.clone(),
        })?);
        let spec = self.schedule.spec();
        w.u32(spec.timesteps as u32);
        w.f64(spec.beta_start);
        w.f64(spec.beta_end);
        let layout = self.model.layout();
        w.u32(layout.entries.len() as u32);
        for e in &layout.entries {
            w.u16(e.name.len() as u16);
            w.bytes(e.name.as_bytes());
            w.u8(e.shape.len() as u8);
            for &d in &e.shape {
                w.u32(d as u32);
            }
            w.f32s(self.model.params()[e.range()].iter().copied());
        }
        let crc = crc64(&w.buf);
        w.u64(crc);
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::CorruptContainer("checkpoint: bad magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        if crc64(body) != stored {
            return Err(Error::CorruptContainer("checkpoint: checksum mismatch".into()));
        }
        let mut r = Reader::new(body, "checkpoint");
        r.take(4)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header: Header = serde_json::from_slice(r.blob()?)?;
        let spec = ScheduleSpec {
            timesteps: r.u32()? as usize,
            beta_start: r.f64()?,
            beta_end: r.f64()?,
        };
        let schedule = NoiseSchedule::new(spec)?;
        let config = header.denoiser;
        config.validate()?;
        let layout = DenoiserModel::<f32>::layout_for(&config)?;
        let count = r.u32()? as usize;
        if count != layout.entries.len() {
            return Err(r.corrupt(format!("{count} tensors, model has {}", layout.entries.len())));
        }
        let mut params = Vec::with_capacity(layout.total);
        for e in &layout.entries {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| r.corrupt("tensor name is not utf-8"))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if name != e.name || shape != e.shape {
                return Err(r.corrupt(format!(
                    "tensor {name} {shape:?} does not match expected {} {:?}",
                    e.name, e.shape
                )));
            }
            params.extend(r.f32s(e.len())?);
        }
        if !r.is_done() {
            return Err(r.corrupt("trailing bytes"));
        }
        let model = DenoiserModel::from_params(config, params)?;
        Self::new(model, schedule, header.meta)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
