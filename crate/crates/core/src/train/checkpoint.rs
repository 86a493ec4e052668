//! Checkpoint file format.
//!
//! ```text
//! bytes 0..8   magic "SNLAB\0\0" + version byte 0x01
//! bytes 8..12  u32 little-endian manifest length
//! ...          UTF-8 JSON manifest: config, step, parameter registry
//!              (names / shapes / offsets / decay flags)
//! ...          little-endian f32 payloads in registry order:
//!              parameters, then first moments, then second moments
//! ```
//!
//! Loading parses into fresh objects and only then returns, so a malformed
//! file never leaves partial state behind; saving goes through a temp file
//! and an atomic rename so an interrupted run keeps its last checkpoint.

use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use super::adamw::OptimizerState;
use crate::error::{Error, Result};
use crate::model::{Layout, ModelConfig, ModelState, ParamEntry};
use crate::real::Real;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"SNLAB\0\0\x01";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: ModelConfig,
    step: u64,
    params: Vec<ParamEntry>,
}

/// Fully parsed checkpoint, independent of the scalar type.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub entries: Vec<ParamEntry>,
    pub params: Vec<f32>,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl Checkpoint {
    /// Reconstructs model and optimizer state. The registry in the file
    /// must match the layout derived from the stored config.
    pub fn into_state<T: Real>(self) -> Result<(ModelState<T>, OptimizerState<T>, u64)> {
        self.config.validate()?;
        let layout = Layout::build(&self.config);
        if layout.entries != self.entries {
            return Err(Error::CheckpointFormat {
                offset: 0,
                message: "parameter registry does not match the stored config".into(),
            });
        }
        let params: Vec<T> = self.params.iter().map(|&x| T::from_f64(x as f64)).collect();
        let opt = OptimizerState {
            m: self.m.iter().map(|&x| T::from_f64(x as f64)).collect(),
            v: self.v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            step: self.step,
        };
        Ok((
            ModelState {
                cfg: self.config,
                layout,
                params,
            },
            opt,
            self.step,
        ))
    }
}

fn push_f32_payload<T: Real>(out: &mut Vec<u8>, values: &[T]) {
    for v in values {
        out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
}

/// Serializes model parameters, optimizer moments and the step counter.
pub fn checkpoint_save<T: Real>(
    model: &ModelState<T>,
    opt: &OptimizerState<T>,
    step: u64,
    path: &Path,
) -> Result<()> {
    let manifest = Manifest {
        version: VERSION,
        config: model.cfg.clone(),
        step,
        params: model.layout.entries.clone(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(12 + manifest_bytes.len() + 12 * model.layout.total);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&(manifest_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    push_f32_payload(&mut out, &model.params);
    push_f32_payload(&mut out, &opt.m);
    push_f32_payload(&mut out, &opt.v);

    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&out)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn take<'a>(bytes: &'a [u8], offset: &mut usize, len: usize, what: &str) -> Result<&'a [u8]> {
    if *offset + len > bytes.len() {
        return Err(Error::CheckpointFormat {
            offset: *offset as u64,
            message: format!("truncated while reading {what}"),
        });
    }
    let s = &bytes[*offset..*offset + len];
    *offset += len;
    Ok(s)
}

fn read_f32s(bytes: &[u8], offset: &mut usize, count: usize, what: &str) -> Result<Vec<f32>> {
    let raw = take(bytes, offset, count * 4, what)?;
    Ok(raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut offset = 0usize;

    let magic = take(&bytes, &mut offset, 8, "magic")?;
    if magic[..7] != CHECKPOINT_MAGIC[..7] {
        return Err(Error::CheckpointFormat {
            offset: 0,
            message: "bad magic".into(),
        });
    }
    if magic[7] != CHECKPOINT_MAGIC[7] {
        return Err(Error::CheckpointVersion {
            found: magic[7],
            expected: CHECKPOINT_MAGIC[7],
        });
    }

    let len_bytes = take(&bytes, &mut offset, 4, "manifest length")?;
    let manifest_len = u32::from_le_bytes([len_bytes[0], len_bytes[1], len_bytes[2], len_bytes[3]])
        as usize;
    let manifest_raw = take(&bytes, &mut offset, manifest_len, "manifest")?;
    let manifest: Manifest =
        serde_json::from_slice(manifest_raw).map_err(|e| Error::CheckpointFormat {
            offset: 12,
            message: format!("manifest: {e}"),
        })?;
    if manifest.version != VERSION {
        return Err(Error::CheckpointVersion {
            found: manifest.version as u8,
            expected: VERSION as u8,
        });
    }

    let total: usize = manifest.params.iter().map(|p| p.len).sum();
    let params = read_f32s(&bytes, &mut offset, total, "parameters")?;
    let m = read_f32s(&bytes, &mut offset, total, "first moments")?;
    let v = read_f32s(&bytes, &mut offset, total, "second moments")?;
    if offset != bytes.len() {
        return Err(Error::CheckpointFormat {
            offset: offset as u64,
            message: format!("{} trailing bytes", bytes.len() - offset),
        });
    }

    Ok(Checkpoint {
        config: manifest.config,
        step: manifest.step,
        entries: manifest.params,
        params,
        m,
        v,
    })
}
