//! Versioned, checksummed tensor archives.
//!
//! Layout: `ATPARCH1` magic, `u32` format version, `u64` header length, a JSON
//! header (kind, free-form metadata, tensor index), the raw little-endian
//! tensor blob, and a SHA-256 digest of everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ATPARCH1";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: BTreeMap<String, Entry>,
}

#[derive(Clone, Debug)]
pub struct ArchiveWriter {
    header: Header,
    blob: Vec<u8>,
}

impl ArchiveWriter {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        ArchiveWriter {
            header: Header {
                kind: kind.to_string(),
                meta,
                tensors: BTreeMap::new(),
            },
            blob: Vec::new(),
        }
    }

    pub fn add<T: Real>(&mut self, name: &str, t: &Tensor<T>) {
        let offset = self.blob.len();
        for &v in t.data() {
            v.write_le(&mut self.blob);
        }
        let entry = Entry {
            dtype: T::DTYPE.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: self.blob.len() - offset,
        };
        let previous = self.header.tensors.insert(name.to_string(), entry);
        assert!(previous.is_none(), "duplicate archive entry {name}");
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + self.blob.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.blob);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Writes via a temporary sibling and rename; returns the file id.
    pub fn write(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

#[derive(Clone, Debug)]
pub struct Archive {
    header: Header,
    blob: Vec<u8>,
    id: String,
}

impl Archive {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 12 + DIGEST_LEN || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not an archive (bad magic)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum);
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "archive version {version} is not supported (expected {VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&body[20..header_end])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let blob = body[header_end..].to_vec();
        for (name, e) in &header.tensors {
            let fits = e.offset.checked_add(e.len).is_some_and(|end| end <= blob.len());
            if !fits {
                return Err(Error::Checkpoint(format!("tensor {name} lies outside the blob")));
            }
        }
        Ok(Archive {
            header,
            blob,
            id: hex::encode(Sha256::digest(bytes)),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn kind(&self) -> &str {
        &self.header.kind
    }

    pub fn meta(&self) -> &serde_json::Value {
        &self.header.meta
    }

    /// SHA-256 of the archive bytes, hex-encoded.
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.header.tensors.keys().map(String::as_str)
    }

    /// Decodes a tensor, converting between element types if needed.
    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self
            .header
            .tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        let bytes = &self.blob[e.offset..e.offset + e.len];
        let numel: usize = e.shape.iter().product();
        let data: Vec<T> = match e.dtype.as_str() {
            "f32" => decode::<f32>(bytes, numel, name)?.into_iter().map(|v| T::lit(v as f64)).collect(),
            "f64" => decode::<f64>(bytes, numel, name)?.into_iter().map(T::lit).collect(),
            other => return Err(Error::Checkpoint(format!("tensor {name}: unknown dtype {other}"))),
        };
        Tensor::from_vec(&e.shape, data)
    }

    pub fn require_kind(&self, kind: &str) -> Result<()> {
        if self.kind() != kind {
            return Err(Error::Checkpoint(format!(
                "archive holds a {}, expected a {kind}",
                self.kind()
            )));
        }
        Ok(())
    }
}

fn decode<T: Real>(bytes: &[u8], numel: usize, name: &str) -> Result<Vec<T>> {
    if bytes.len() != numel * T::BYTES {
        return Err(Error::Checkpoint(format!("tensor {name}: size does not match its shape")));
    }
    Ok(bytes.chunks_exact(T::BYTES).map(T::read_le).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ArchiveWriter {
        let mut w = ArchiveWriter::new("test", serde_json::json!({"step": 3}));
        w.add("a", &Tensor::from_vec(&[2, 2], vec![1.0f32, -2.5, 3.25, 0.0]).unwrap());
        w.add("b", &Tensor::from_vec(&[3], vec![0.1f64, 0.2, 0.3]).unwrap());
        w
    }

    #[test]
    fn round_trip() {
        let a = Archive::from_bytes(&sample().to_bytes()).unwrap();
        assert_eq!(a.kind(), "test");
        assert_eq!(a.meta()["step"], 3);
        assert_eq!(a.tensor::<f32>("a").unwrap().data(), &[1.0, -2.5, 3.25, 0.0]);
        assert_eq!(a.tensor::<f64>("b").unwrap().data(), &[0.1, 0.2, 0.3]);
        assert_eq!(a.tensor::<f64>("a").unwrap().data(), &[1.0, -2.5, 3.25, 0.0]);
        assert!(a.tensor::<f32>("c").is_err());
        assert_eq!(a.names().collect::<Vec<_>>(), ["a", "b"]);
    }

    #[test]
    fn every_flipped_byte_is_detected() {
        let bytes = sample().to_bytes();
        for i in 0..bytes.len() {
            let mut t = bytes.clone();
            t[i] ^= 0x10;
            assert!(Archive::from_bytes(&t).is_err(), "byte {i}");
        }
        let mut t = bytes.clone();
        t[30] ^= 1;
        assert!(matches!(Archive::from_bytes(&t), Err(Error::Checksum)));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        let n = bytes.len() - DIGEST_LEN;
        let digest = Sha256::digest(&bytes[..n]);
        bytes[n..].copy_from_slice(&digest);
        let err = Archive::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }

    #[test]
    fn ids_are_content_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.atp");
        let id = sample().write(&p).unwrap();
        assert_eq!(Archive::read(&p).unwrap().id(), id);
        assert_eq!(id.len(), 64);
    }
}
