//! Versioned binary checkpoints of trained models.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::training::TrainedModel;

const MAGIC: &[u8; 8] = b"INRATLS\0";
pub const FORMAT_VERSION: u32 = 1;

pub fn to_bytes(model: &TrainedModel) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend(bincode::serialize(model)?);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainedModel> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Serialization("not a model checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Serialization(format!("checkpoint version {version}, expected {FORMAT_VERSION}")));
    }
    let model: TrainedModel = bincode::deserialize(&bytes[12..])?;
    model.config.validate()?;
    model.params.check(&model.config)?;
    Ok(model)
}

pub fn save(model: &TrainedModel, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainedModel> {
    from_bytes(&fs::read(path)?)
}

/// FNV-1a over the network parameters' bit patterns.
pub fn params_checksum(model: &TrainedModel) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in model.params.tensors() {
        for v in &t.data {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_foreign_bytes() {
        assert!(matches!(from_bytes(b"hello"), Err(Error::Serialization(_))));
        let mut b = MAGIC.to_vec();
        b.extend_from_slice(&99u32.to_le_bytes());
        assert!(matches!(from_bytes(&b), Err(Error::Serialization(_))));
    }
}
