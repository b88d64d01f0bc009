//! `MLDW` weight files.
//!
//! ```text
//! magic "MLDW" | version u32 | config hash u64 | layer count u32
//! per tensor: name (u16 len + UTF-8) | rank u8 | dims u32 x rank | values
//! ```
//!
//! Version 1 stores values as `f32` (the exchange format). Version 2 stores
//! `f64` and is only embedded in training checkpoints, where resuming must
//! replay bit for bit.

use std::path::Path;

use indexmap::IndexMap;

use super::{ModelConfig, ModelWeights};
use crate::binio::{read_file, write_atomic, Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) const MAGIC: &[u8; 4] = b"MLDW";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn version(self) -> u32 {
        match self {
            Precision::F32 => 1,
            Precision::F64 => 2,
        }
    }
}

pub fn encode_weights(weights: &ModelWeights, config_hash: u64, precision: Precision) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(precision.version());
    w.u64(config_hash);
    w.u32(weights.tensors.len() as u32);
    for (name, t) in &weights.tensors {
        w.str16(name, "tensor name")?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::format("rank", format!("{name} has rank {}", t.rank())))?;
        w.u8(rank);
        for &d in t.shape() {
            w.u32(u32::try_from(d).map_err(|_| Error::format("dims", format!("{name} axis {d} exceeds u32")))?);
        }
        match precision {
            Precision::F32 => t.data().iter().for_each(|&v| w.f32(v as f32)),
            Precision::F64 => t.data().iter().for_each(|&v| w.f64(v)),
        }
    }
    Ok(w.buf)
}

/// Decodes one weights block; returns the weights and the stored config hash.
pub(crate) fn decode_weights_from(r: &mut Reader<'_>) -> Result<(ModelWeights, u64)> {
    r.magic(MAGIC)?;
    let version = r.u32("version")?;
    let precision = match version {
        1 => Precision::F32,
        2 => Precision::F64,
        v => return Err(Error::format("version", format!("unsupported weights version {v}"))),
    };
    let hash = r.u64("config hash")?;
    let count = r.u32("layer count")?;
    let mut tensors = IndexMap::new();
    for _ in 0..count {
        let name = r.str16("tensor name")?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(match precision {
                Precision::F32 => r.f32("values")? as f64,
                Precision::F64 => r.f64("values")?,
            });
        }
        let t = Tensor::new(shape, data).map_err(|e| Error::format("dims", format!("{name}: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::format("tensor name", format!("duplicate tensor `{name}`")));
        }
    }
    Ok((ModelWeights { tensors }, hash))
}

pub fn decode_weights(bytes: &[u8]) -> Result<(ModelWeights, u64)> {
    let mut r = Reader::new(bytes);
    let out = decode_weights_from(&mut r)?;
    r.finish()?;
    Ok(out)
}

pub fn save_weights(weights: &ModelWeights, config: &ModelConfig, path: &Path) -> Result<()> {
    weights.check_layout(config)?;
    write_atomic(path, &encode_weights(weights, config.hash(), Precision::F32)?)
}

/// Loads a weights file without checking it against a config.
pub fn load_weights(path: &Path) -> Result<(ModelWeights, u64)> {
    decode_weights(&read_file(path)?)
}

/// Loads a weights file and verifies it was written for `config`.
pub fn load_weights_checked(path: &Path, config: &ModelConfig) -> Result<ModelWeights> {
    let (weights, hash) = load_weights(path)?;
    if hash != config.hash() {
        return Err(Error::format(
            "config hash",
            format!("file has {hash:#018x}, supplied config hashes to {:#018x}", config.hash()),
        ));
    }
    weights.check_layout(config).map_err(|e| Error::format("layers", e.to_string()))?;
    Ok(weights)
}
