//! Binary parameter container shared by backbone, adapter and classifier files.
//!
//! Layout: `CATCHCK1` magic, `u64` LE header length, JSON header, `f64` LE
//! payload, then a 32-byte SHA-256 of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"CATCHCK1";
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, counted in `f64` elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn meta<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.header.meta.clone())?)
    }

    /// Copies every stored tensor into `target`, after checking that names
    /// and shapes line up exactly. Nothing is written on mismatch.
    pub fn apply_to(&self, target: &mut impl ParamSet) -> Result<()> {
        let names = target.param_names();
        if names.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, target expects {}",
                self.tensors.len(),
                names.len()
            )));
        }
        for (name, t) in &self.tensors {
            let p = target.param(name)?;
            if p.tensor.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "tensor `{name}` has shape {:?} in checkpoint but {:?} in model",
                    t.shape(),
                    p.tensor.shape()
                )));
            }
        }
        for (name, t) in &self.tensors {
            target.param_mut(name)?.tensor.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

pub fn encode(kind: &str, meta: serde_json::Value, params: &impl ParamSet) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut offset = 0;
    for p in params.params() {
        let len = p.tensor.numel();
        entries.push(TensorEntry {
            name: p.name().to_string(),
            shape: p.tensor.shape().to_vec(),
            offset,
            len,
        });
        offset += len;
    }
    let header = serde_json::to_vec(&Header {
        kind: kind.to_string(),
        meta,
        tensors: entries,
    })?;
    let mut bytes = Vec::with_capacity(16 + header.len() + offset * 8 + DIGEST_LEN);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for p in params.params() {
        for v in p.tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    Ok(bytes)
}

pub fn decode(bytes: &[u8], source: &Path) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN || &bytes[..8] != MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint file", source.display())));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    let found = Sha256::digest(body);
    if found.as_slice() != digest {
        return Err(Error::Checksum {
            path: source.to_path_buf(),
            expected: hex::encode(digest),
            found: hex::encode(found),
        });
    }
    let header_len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| Error::Format("header length exceeds file size".into()))?;
    let header: Header = serde_json::from_slice(&body[16..payload_start])?;
    let payload = &body[payload_start..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let end = (e.offset + e.len) * 8;
        if end > payload.len() || e.shape.iter().product::<usize>() != e.len {
            return Err(Error::Format(format!("tensor `{}` is out of bounds", e.name)));
        }
        let data = payload[e.offset * 8..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok(Checkpoint { header, tensors })
}

pub fn save(path: &Path, kind: &str, meta: serde_json::Value, params: &impl ParamSet) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let bytes = encode(kind, meta, params)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads and verifies a checkpoint; `kind` must match what was saved.
pub fn load(path: &Path, kind: &str) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = decode(&bytes, path)?;
    if ck.header.kind != kind {
        return Err(Error::Format(format!(
            "{} holds a `{}` checkpoint, expected `{kind}`",
            path.display(),
            ck.header.kind
        )));
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParameterStore;

    fn store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("a", Tensor::new(vec![2, 2], vec![1.0, -0.0, 3.5, f64::MIN_POSITIVE]).unwrap(), false)
            .unwrap();
        s.insert("b", Tensor::zeros(vec![0, 4]), true).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store();
        let bytes = encode("test", serde_json::json!({"x": 1}), &s).unwrap();
        let ck = decode(&bytes, Path::new("mem")).unwrap();
        let mut t = store();
        t.get_mut("a").unwrap().tensor.data_mut().fill(9.0);
        ck.apply_to(&mut t).unwrap();
        assert_eq!(t.checksum(), s.checksum());
        assert_eq!(ck.header.meta["x"], 1);
    }

    #[test]
    fn any_flipped_byte_is_caught() {
        let bytes = encode("test", serde_json::Value::Null, &store()).unwrap();
        for i in [9, 20, bytes.len() - 40, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[i] ^= 0x10;
            assert!(decode(&bad, Path::new("mem")).is_err(), "byte {i}");
        }
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 45] ^= 1;
        assert!(matches!(decode(&bad, Path::new("mem")), Err(Error::Checksum { .. })));
    }

    #[test]
    fn shape_mismatch_writes_nothing() {
        let ck = decode(&encode("t", serde_json::Value::Null, &store()).unwrap(), Path::new("m")).unwrap();
        let mut other = ParameterStore::new();
        other.insert("a", Tensor::zeros(vec![4]), false).unwrap();
        other.insert("b", Tensor::zeros(vec![0, 4]), true).unwrap();
        assert!(matches!(ck.apply_to(&mut other), Err(Error::Config(_))));
        assert!(other.get("a").unwrap().tensor.data().iter().all(|v| *v == 0.0));
    }
}
