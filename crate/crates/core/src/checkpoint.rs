//! LRW1 checkpoints: `"LRW1"`, a little-endian u32 header length, a JSON
//! header, then the raw little-endian f32 payload.

use std::path::Path;

use reform_autodiff::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};

pub const MAGIC: &[u8; 4] = b"LRW1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    tensors: Vec<TensorEntry>,
    metadata: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        Checkpoint {
            tensors: Vec::new(),
            metadata,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn extend_from_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.push(format!("{prefix}{name}"), t.clone());
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CoreError::Checkpoint(format!("missing tensor '{name}'")))
    }

    /// Overwrites every tensor of `store` with the checkpoint's `prefix`-named copy.
    pub fn load_into(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = store.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            let t = self.get(&format!("{prefix}{name}"))?;
            let slot = &mut store.tensors_mut()[i];
            if slot.shape() != t.shape() {
                return Err(CoreError::Checkpoint(format!(
                    "tensor '{name}' has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len(),
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = serde_json::to_vec(&Header {
            format_version: FORMAT_VERSION,
            tensors: entries,
            metadata: self.metadata.clone(),
        })?;
        let len = u32::try_from(header.len())
            .map_err(|_| CoreError::Checkpoint("header too large".into()))?;
        let mut out = Vec::with_capacity(8 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(CoreError::Checkpoint("not an LRW1 checkpoint (bad magic)".into()));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let header_end = 8usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| CoreError::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[8..header_end])?;
        if header.format_version != FORMAT_VERSION {
            return Err(CoreError::Checkpoint(format!(
                "unsupported format_version {}",
                header.format_version
            )));
        }
        let payload = &bytes[header_end..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let end = e
                .offset
                .checked_add(n * 4)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| CoreError::Checkpoint(format!("tensor '{}' runs past the payload", e.name)))?;
            let data = payload[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Checkpoint {
            tensors,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Hex SHA-256 of the serialized form.
    pub fn sha256(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
