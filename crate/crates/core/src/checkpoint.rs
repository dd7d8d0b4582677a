//! Versioned model checkpoints.
//!
//! Layout (all integers little-endian):
//! `b"ALFCKPT\0"`, `u32` format version, 32-byte SHA-256 of the header JSON,
//! `u64` header length, header JSON (`{"model": .., "schema": ..}`), `u32`
//! tensor count, then per tensor: `u32` name length, name, `u8` kind
//! (0 trainable, 1 buffer), `u32` rank, `u64` extents, `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::FeatureSchema;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamKind;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ALFCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    schema: FeatureSchema,
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        model: model.config.clone(),
        schema: model.schema.clone(),
    })
    .expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&header));
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    let entries = model.store.entries();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(match e.kind {
            ParamKind::Trainable => 0,
            ParamKind::Buffer => 1,
        });
        out.extend_from_slice(&(e.value.ndim() as u32).to_le_bytes());
        for &s in e.value.shape() {
            out.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for &x in e.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&to_bytes(model)).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parse a checkpoint. When `expected` is given, its digest must equal the
/// stored model configuration's digest.
pub fn from_bytes(buf: &[u8], expected: Option<&ModelConfig>) -> Result<Model> {
    let mut c = Cursor { buf, at: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let digest = c.take(32)?.to_vec();
    let len = c.u64()? as usize;
    let header = c.take(len)?;
    if Sha256::digest(header).as_slice() != digest.as_slice() {
        return Err(Error::Checkpoint("config digest mismatch".into()));
    }
    let h: Header = serde_json::from_slice(header)?;
    if let Some(exp) = expected {
        if exp.digest() != h.model.digest() {
            return Err(Error::Checkpoint(format!(
                "config digest mismatch: checkpoint {} vs expected {}",
                h.model.digest(),
                exp.digest()
            )));
        }
    }
    let mut model = Model::new(&h.model, &h.schema, 0)?;
    let count = c.u32()? as usize;
    if count != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} tensors, model expects {}",
            model.store.len()
        )));
    }
    for _ in 0..count {
        let n = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(n)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let _kind = c.take(1)?[0];
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|x| x as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data: Vec<f32> = c
            .take(len * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
        model
            .store
            .set(id, Tensor::new(&shape, data)?)
            .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
    }
    if c.at != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after tensor table".into()));
    }
    model.reset_caches();
    Ok(model)
}

pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Model> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&buf, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureSpec, TaskSpec};
    use crate::sngp::SngpConfig;

    fn model() -> Model {
        let schema = FeatureSchema::new(vec![FeatureSpec::numeric("a")], vec![TaskSpec::binary("y")]).unwrap();
        let cfg = ModelConfig {
            d: 4,
            heads: 2,
            layers: 1,
            ffn_dim: 4,
            sngp: SngpConfig {
                d_rf: 8,
                ..Default::default()
            },
            ..Default::default()
        };
        Model::new(&cfg, &schema, 9).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let back = from_bytes(&to_bytes(&m), Some(&m.config)).unwrap();
        for (a, b) in m.store.entries().iter().zip(back.store.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.data(), b.value.data());
        }
    }

    #[test]
    fn corrupted_header_is_rejected() {
        let m = model();
        let mut bytes = to_bytes(&m);
        let at = 8 + 4 + 32 + 8 + 3;
        bytes[at] ^= 0x20;
        assert!(matches!(from_bytes(&bytes, None), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn different_expected_config_is_rejected() {
        let m = model();
        let mut other = m.config.clone();
        other.layers = 2;
        assert!(matches!(from_bytes(&to_bytes(&m), Some(&other)), Err(Error::Checkpoint(_))));
    }
}
