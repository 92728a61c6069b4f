//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, u32 LE header length, JSON header (kind, version, config echo,
//! basis hash, tensor table), then the tensors as little-endian f32.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nn::{ParamStore, TensorMap};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"TFCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub version: u32,
    pub config: serde_json::Value,
    pub basis_hash: Option<String>,
    /// Non-trainable state such as input normalization statistics.
    #[serde(default)]
    pub extra: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: TensorMap,
}

impl Checkpoint {
    pub fn from_store(
        kind: &str,
        config: serde_json::Value,
        basis_hash: Option<String>,
        extra: serde_json::Value,
        store: &ParamStore,
    ) -> Result<Self> {
        let tensors = store.to_map()?;
        let mut entries = Vec::with_capacity(tensors.len());
        let mut offset = 0;
        for (name, (shape, values)) in &tensors {
            entries.push(TensorEntry { name: name.clone(), shape: shape.clone(), offset });
            offset += values.len();
        }
        Ok(Self {
            header: CheckpointHeader {
                kind: kind.to_string(),
                version: CHECKPOINT_VERSION,
                config,
                basis_hash,
                extra,
                tensors: entries,
            },
            tensors,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for entry in &self.header.tensors {
            let (_, values) = &self.tensors[&entry.name];
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::Data("not a checkpoint file".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + hlen {
            return Err(Error::Data("checkpoint header truncated".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + hlen])?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::SchemaVersion { found: header.version, expected: CHECKPOINT_VERSION });
        }
        let data = &bytes[12 + hlen..];
        let mut tensors = TensorMap::new();
        for entry in &header.tensors {
            let len: usize = entry.shape.iter().product();
            let (start, end) = (entry.offset * 4, (entry.offset + len) * 4);
            if end > data.len() {
                return Err(Error::Data(format!("checkpoint truncated inside tensor {}", entry.name)));
            }
            let values = data[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(entry.name.clone(), (entry.shape.clone(), values));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        fs::write(path, &bytes)?;
        Ok(hash_bytes(&bytes))
    }

    pub fn load(path: &Path, expected_kind: &str) -> Result<Self> {
        let ck = Self::from_bytes(&fs::read(path)?)?;
        if ck.header.kind != expected_kind {
            return Err(Error::Data(format!(
                "{} holds a {} checkpoint, expected {expected_kind}",
                path.display(),
                ck.header.kind
            )));
        }
        Ok(ck)
    }

    /// Fails unless the checkpoint was trained against `basis_hash`.
    pub fn require_basis(&self, basis_hash: &str) -> Result<()> {
        match &self.header.basis_hash {
            Some(h) if h == basis_hash => Ok(()),
            Some(h) => Err(Error::BasisMismatch { expected: h.clone(), found: basis_hash.to_string() }),
            None => Err(Error::BasisMismatch { expected: "none".into(), found: basis_hash.to_string() }),
        }
    }
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..16])
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hash_bytes(&fs::read(path)?))
}
