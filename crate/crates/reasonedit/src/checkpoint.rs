//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! `RGCK`, u32 version, u64 header length, header JSON (model config,
//! world config, vocabulary words, frozen prefixes), u32 codebook rows,
//! u32 codebook dim, codebook values, u32 parameter count, then per
//! parameter: u16 name length, name, u8 rank, u32 extents, f64 values.
//! A 32-byte SHA-256 of everything before it closes the file.

use std::fs;
use std::path::Path;

use reasonedit_core::microworld::{World, WorldConfig};
use reasonedit_core::model::{Model, ModelConfig};
use reasonedit_core::params::hex_digest;
use reasonedit_core::tokenization::Codebook;
use reasonedit_core::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RGCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    world: WorldConfig,
    words: Vec<String>,
    frozen: Vec<String>,
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let header = Header {
        model: model.cfg.clone(),
        world: model.world.config.clone(),
        words: model.world.vocab.words().to_vec(),
        frozen: model.store.frozen_names().cloned().collect(),
    };
    let json = serde_json::to_vec(&header).map_err(Error::json)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let cb = &model.world.codebook;
    out.extend_from_slice(&(cb.len() as u32).to_le_bytes());
    out.extend_from_slice(&(cb.dim() as u32).to_le_bytes());
    for v in cb.codes().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (name, t) in model.store.iter() {
        let nb = name.as_bytes();
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.push(t.ndim() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("checkpoint size overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Format("checkpoint hash mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("checkpoint version {version}, expected {VERSION}")));
    }
    let hlen = r.u64()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(Error::json)?;
    let rows = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let codes = Tensor::matrix(rows, dim, r.f64s(rows * dim)?)?;
    let world = World::from_parts(header.world, Codebook::new(codes)?)?;
    if world.vocab.words() != header.words.as_slice() {
        return Err(Error::Format("checkpoint vocabulary differs from this build".into()));
    }
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let nlen = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<_>>()?;
        let n = shape.iter().product();
        store.insert(name, Tensor::new(&shape, r.f64s(n)?)?);
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    let model = Model::from_store(header.model, world, store)?;
    let frozen: Vec<String> = model.store.frozen_names().cloned().collect();
    if frozen != header.frozen {
        return Err(Error::Format("frozen parameter set differs".into()));
    }
    Ok(model)
}

/// Hex SHA-256 of the serialized checkpoint.
pub fn content_hash(bytes: &[u8]) -> String {
    hex_digest(&Sha256::digest(bytes))
}

/// Writes the checkpoint and returns its content hash.
pub fn save(model: &Model, path: &Path) -> Result<String> {
    let bytes = to_bytes(model)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(content_hash(&bytes))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        let wc = WorldConfig {
            height: 6,
            width: 6,
            min_objects: 1,
            max_objects: 2,
            codebook_size: 16,
        };
        let world = World::new(wc.clone(), 0).unwrap();
        let mut cfg = ModelConfig::desk(&wc);
        cfg.mllm.d_model = 8;
        cfg.mllm.d = 8;
        cfg.mllm.heads = 2;
        cfg.mllm.layers = 1;
        cfg.denoiser.dim = 8;
        cfg.denoiser.heads = 2;
        Model::new(cfg, world, 1).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let bytes = to_bytes(&m).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.store.content_hash(""), m.store.content_hash(""));
        assert_eq!(back.cfg, m.cfg);
        assert_eq!(back.world, m.world);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = to_bytes(&model()).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(from_bytes(&bytes), Err(Error::Format(_))));
        assert!(from_bytes(b"RGCKxxxx").is_err());
    }
}
