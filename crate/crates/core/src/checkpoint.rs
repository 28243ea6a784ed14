//! Parameter checkpoints.
//!
//! Layout, all integers little-endian:
//! `b"EGOCKPT\0"`, `u32` version, `u64` config hash, `u32` tensor count,
//! then per tensor: `u32` name length, UTF-8 name, `u32` rank, `u64` dims,
//! `f64` data.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 8] = b"EGOCKPT\0";
pub const VERSION: u32 = 1;

/// First 8 bytes of SHA-256 over the config's JSON, read little-endian.
pub fn config_hash<T: Serialize>(config: &T) -> Result<u64> {
    let bytes = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&bytes);
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    Ok(u64::from_le_bytes(head))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub tensors: Vec<NamedTensor>,
}

pub fn encode(store: &ParamStore, config_hash: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + store.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&config_hash.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let config_hash = r.u64()?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| "tensor name is not UTF-8".to_string())?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let data = r
            .take(numel.checked_mul(8).ok_or("tensor too large")?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(NamedTensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(Checkpoint { config_hash, tensors })
}

pub fn save(path: &Path, store: &ParamStore, config_hash: u64) -> Result<()> {
    std::fs::write(path, encode(store, config_hash)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::format(path, reason))
}

/// Loads `path` into `store`, which must have the same names and shapes in
/// the same order, and a matching config hash.
pub fn load_into(path: &Path, store: &mut ParamStore, config_hash: u64) -> Result<()> {
    let ckpt = read(path)?;
    if ckpt.config_hash != config_hash {
        return Err(Error::Config(format!(
            "{}: config hash {:016x} does not match model config {:016x}",
            path.display(),
            ckpt.config_hash,
            config_hash
        )));
    }
    if ckpt.tensors.len() != store.len() {
        return Err(Error::format(
            path,
            format!("{} tensors, model has {}", ckpt.tensors.len(), store.len()),
        ));
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, nt) in ids.into_iter().zip(&ckpt.tensors) {
        if store.name(id) != nt.name || store.get(id).shape() != nt.shape.as_slice() {
            return Err(Error::format(
                path,
                format!(
                    "tensor {} {:?} does not match model tensor {} {:?}",
                    nt.name,
                    nt.shape,
                    store.name(id),
                    store.get(id).shape()
                ),
            ));
        }
    }
    for (id, nt) in store.ids().collect::<Vec<_>>().into_iter().zip(ckpt.tensors) {
        store.get_mut(id).data_mut().copy_from_slice(&nt.data);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", Tensor::matrix(2, 2, vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE]).unwrap());
        s.add("b.bias", Tensor::row_vector(vec![0.1, 0.2, 0.3]));
        s
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let src = store();
        save(&path, &src, 42).unwrap();
        let mut dst = store();
        for id in dst.ids().collect::<Vec<_>>() {
            dst.get_mut(id).data_mut().fill(0.0);
        }
        load_into(&path, &mut dst, 42).unwrap();
        assert_eq!(dst, src);
        assert!(load_into(&path, &mut dst, 43).is_err());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&store(), 1);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(config_hash(&vec![1, 2]).unwrap(), config_hash(&vec![1, 2]).unwrap());
        assert_ne!(config_hash(&vec![1, 2]).unwrap(), config_hash(&vec![2, 1]).unwrap());
    }
}
