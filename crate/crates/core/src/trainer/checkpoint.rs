//! `MLDC` training checkpoints.
//!
//! ```text
//! magic "MLDC" | version u32 | epochs done u64 | seed u64 | optimizer steps u64
//! optimizer kind u8 | lr, momentum, rms_decay, rms_epsilon as f64
//! weights: MLDW block (f64) | optimizer slots: MLDW block (f64)
//! ```

use std::path::Path;

use super::optim::{OptimizerConfig, OptimizerKind, OptimizerState};
use crate::binio::{read_file, write_atomic, Reader, Writer};
use crate::error::{Error, Result};
use crate::graph::io::{decode_weights_from, encode_weights, Precision};
use crate::graph::{ModelConfig, ModelWeights};

const MAGIC: &[u8; 4] = b"MLDC";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub weights: ModelWeights,
    pub optimizer: OptimizerState,
    pub epochs_done: usize,
    pub seed: u64,
}

pub fn encode_checkpoint(ck: &Checkpoint, config: &ModelConfig) -> Result<Vec<u8>> {
    ck.weights.check_layout(config)?;
    ck.optimizer.slots.check_layout(config)?;
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u64(ck.epochs_done as u64);
    w.u64(ck.seed);
    w.u64(ck.optimizer.steps);
    let c = &ck.optimizer.config;
    w.u8(match c.kind {
        OptimizerKind::SgdMomentum => 0,
        OptimizerKind::Rmsprop => 1,
    });
    for v in [c.lr, c.momentum, c.rms_decay, c.rms_epsilon] {
        w.f64(v);
    }
    w.bytes(&encode_weights(&ck.weights, config.hash(), Precision::F64)?);
    w.bytes(&encode_weights(&ck.optimizer.slots, config.hash(), Precision::F64)?);
    Ok(w.buf)
}

pub fn decode_checkpoint(bytes: &[u8], config: &ModelConfig) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format("version", format!("unsupported checkpoint version {version}")));
    }
    let epochs_done = r.u64("epochs done")? as usize;
    let seed = r.u64("seed")?;
    let steps = r.u64("optimizer steps")?;
    let kind = match r.u8("optimizer kind")? {
        0 => OptimizerKind::SgdMomentum,
        1 => OptimizerKind::Rmsprop,
        k => return Err(Error::format("optimizer kind", format!("unknown kind {k}"))),
    };
    let lr = r.f64("lr")?;
    let momentum = r.f64("momentum")?;
    let rms_decay = r.f64("rms_decay")?;
    let rms_epsilon = r.f64("rms_epsilon")?;
    let mut blocks = Vec::with_capacity(2);
    for _ in 0..2 {
        let (w, hash) = decode_weights_from(&mut r)?;
        if hash != config.hash() {
            return Err(Error::format(
                "config hash",
                format!("checkpoint has {hash:#018x}, supplied config hashes to {:#018x}", config.hash()),
            ));
        }
        w.check_layout(config).map_err(|e| Error::format("layers", e.to_string()))?;
        blocks.push(w);
    }
    r.finish()?;
    let slots = blocks.pop().expect("two blocks");
    let weights = blocks.pop().expect("two blocks");
    let config = OptimizerConfig { kind, lr, momentum, rms_decay, rms_epsilon };
    config.validate().map_err(|e| Error::format("optimizer", e.to_string()))?;
    Ok(Checkpoint { weights, optimizer: OptimizerState { config, slots, steps }, epochs_done, seed })
}

pub fn save_checkpoint(ck: &Checkpoint, config: &ModelConfig, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck, config)?)
}

pub fn load_checkpoint(path: &Path, config: &ModelConfig) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_network;

    #[test]
    fn round_trip_and_hash_check() {
        let cfg = ModelConfig::tiny();
        let ck = Checkpoint {
            weights: build_network(&cfg, 3).unwrap(),
            optimizer: OptimizerState::new(OptimizerConfig::default(), &cfg).unwrap(),
            epochs_done: 0,
            seed: 9,
        };
        let bytes = encode_checkpoint(&ck, &cfg).unwrap();
        assert_eq!(decode_checkpoint(&bytes, &cfg).unwrap(), ck);
        let other = ModelConfig { embedding_dim: 8, ..cfg.clone() };
        assert!(matches!(decode_checkpoint(&bytes, &other), Err(Error::Format { ref field, .. }) if field == "config hash"));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3], &cfg).is_err());
        let missing = std::env::temp_dir().join("definitely-missing-checkpoint.mldc");
        assert!(matches!(load_checkpoint(&missing, &cfg), Err(Error::Io { .. })));
    }
}
