//! Flat checkpoint files.
//!
//! Layout: the 8-byte magic `CBERTCKP`, a little-endian `u32` format version,
//! a little-endian `u64` header length, the JSON header (parameter manifest
//! plus free-form metadata), then every parameter's values as little-endian
//! `f64` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CBERTCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    params: Vec<ManifestEntry>,
    meta: serde_json::Value,
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: serde_json::Value) -> Result<()> {
    let header = Header {
        version: FORMAT_VERSION,
        params: store
            .iter()
            .map(|(_, p)| ManifestEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        meta,
    };
    let header = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(20 + header.len() + store.num_scalars() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, p) in store.iter() {
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |message: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut offset = 20 + hlen;
    let mut store = ParamStore::new();
    for entry in header.params {
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(offset..offset + n * 8)
            .ok_or_else(|| bad(&format!("truncated data for {}", entry.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.add(entry.name, Tensor::new(entry.shape, data)?)?;
        offset += n * 8;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after parameter data"));
    }
    Ok((store, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits_and_meta() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::from_rows(&[vec![1.5, -0.0], vec![f64::MIN_POSITIVE, 3.0]]).unwrap())
            .unwrap();
        s.add("b", Tensor::vector(vec![std::f64::consts::PI])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &s, serde_json::json!({"k": 3})).unwrap();
        let (back, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(meta["k"], 3);
        for ((_, p), (_, q)) in s.iter().zip(back.iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value.shape(), q.value.shape());
            let pb: Vec<u64> = p.value.data().iter().map(|v| v.to_bits()).collect();
            let qb: Vec<u64> = q.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(pb, qb);
        }
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad");
        fs::write(&path, b"hello world, definitely not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
