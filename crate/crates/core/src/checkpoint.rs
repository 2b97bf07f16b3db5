//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "MATNCKPT"
//! version      u32
//! payload_len  u64
//! payload      payload_len bytes
//! checksum     32 bytes, SHA-256 of payload
//! ```
//!
//! The payload is a `u32` length plus UTF-8 JSON header holding the model
//! config and vocabulary, followed by a `u32` tensor count and, for each
//! tensor, a `u16` name length, the name, a `u8` rank, `u32` extents and the
//! values as `f64`. Shared parameters are stored once, under their single
//! registered name.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, MultiSourceModel};
use crate::tasks::Vocab;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MATNCKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    vocab: Vocab,
}

pub fn to_bytes(model: &MultiSourceModel) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        model: model.config().clone(),
        vocab: model.vocab().clone(),
    })?;
    let mut payload = Vec::new();
    payload.extend_from_slice(&(header.len() as u32).to_le_bytes());
    payload.extend_from_slice(&header);
    payload.extend_from_slice(&(model.store().len() as u32).to_le_bytes());
    for (_, name, t) in model.store().iter() {
        payload.extend_from_slice(&(name.len() as u16).to_le_bytes());
        payload.extend_from_slice(name.as_bytes());
        payload.push(t.rank() as u8);
        for &d in t.shape() {
            payload.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(payload.len() + 52);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&Sha256::digest(&payload));
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CorruptCheckpoint(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<MultiSourceModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::CorruptCheckpoint("not a checkpoint file".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let len = r.u64("payload length")?;
    let len = usize::try_from(len).map_err(|_| Error::CorruptCheckpoint("payload too large".into()))?;
    let payload = r.take(len, "payload")?;
    let checksum = r.take(32, "checksum")?;
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes after checksum".into()));
    }
    if Sha256::digest(payload).as_slice() != checksum {
        return Err(Error::CorruptCheckpoint("checksum mismatch".into()));
    }

    let mut p = Reader { bytes: payload, pos: 0 };
    let header_len = p.u32("header length")? as usize;
    let header: Header = serde_json::from_slice(p.take(header_len, "header")?)
        .map_err(|e| Error::CorruptCheckpoint(format!("bad header: {e}")))?;
    let mut model = MultiSourceModel::new(header.model, header.vocab, 0)?;
    let count = p.u32("tensor count")? as usize;
    if count != model.store().len() {
        return Err(Error::CorruptCheckpoint(format!(
            "expected {} tensors, found {count}",
            model.store().len()
        )));
    }
    for i in 0..count {
        let name_len = p.u16("name length")? as usize;
        let name = std::str::from_utf8(p.take(name_len, "name")?)
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = p.u8("rank")? as usize;
        let shape = (0..rank).map(|_| p.u32("extent").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = p.take(n.saturating_mul(8), "tensor data")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::CorruptCheckpoint(format!("tensor {name}: {e}")))?;
        let id = model
            .store()
            .id(&name)
            .filter(|id| id.0 == i)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("unexpected tensor {name}")))?;
        let slot = model.store_mut().get_mut(id);
        if slot.shape() != tensor.shape() {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor {name} has shape {:?}, model expects {:?}",
                tensor.shape(),
                slot.shape()
            )));
        }
        *slot = tensor;
    }
    if p.pos != payload.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes in payload".into()));
    }
    Ok(model)
}

pub fn save(model: &MultiSourceModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<MultiSourceModel> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combination::{CombinationConfig, Strategy};
    use crate::model::SourceKind;
    use crate::recurrent::DecoderKind;

    fn model() -> MultiSourceModel {
        let mut c = ModelConfig::new(
            vec![SourceKind::Text, SourceKind::Text],
            CombinationConfig::new(Strategy::Flat, true, true),
            DecoderKind::Cgru,
        );
        c.embed_dim = 3;
        c.hidden_dim = 4;
        c.attn_dim = 8;
        MultiSourceModel::new(c, Vocab::new(["x", "y"]), 9).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = model();
        let a = to_bytes(&m).unwrap();
        let back = from_bytes(&a).unwrap();
        assert_eq!(back.store(), m.store());
        assert_eq!(to_bytes(&back).unwrap(), a);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = to_bytes(&model()).unwrap();
        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(from_bytes(&flipped), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 5]), Err(Error::CorruptCheckpoint(_))));
        let mut versioned = bytes.clone();
        versioned[8] = 7;
        assert!(matches!(
            from_bytes(&versioned),
            Err(Error::CheckpointVersion { found: 7, expected: 1 })
        ));
        assert!(from_bytes(b"hello").is_err());
    }
}
