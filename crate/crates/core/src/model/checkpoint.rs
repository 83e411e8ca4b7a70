//! Self-describing binary checkpoint archive.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON header
//! (metadata plus a tensor table), then every tensor's values as
//! little-endian `f64` in table order. Values are stored bit-for-bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelEcho, ModelError};
use crate::schedule::ScheduleState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PIPENET1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelEcho,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Epochs fully completed so far.
    pub epochs_done: usize,
    /// Schedule position of the next epoch to run.
    pub schedule: ScheduleState,
    /// Free-form provenance (for example the training configuration).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    /// Model tensors by dotted name; optimizer state uses the `optim.` prefix.
    pub tensors: BTreeMap<String, StoredTensor>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    table: Vec<TableEntry>,
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    name: String,
    shape: Vec<usize>,
    len: usize,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let table = self
            .tensors
            .iter()
            .map(|(name, t)| TableEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                len: t.data.len(),
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            table,
        })
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let payload: usize = self.tensors.values().map(|t| t.data.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + header.len() + payload);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let bad = |msg: &str| ModelError::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint archive (bad magic)"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..header_end]).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        let mut offset = header_end;
        for entry in header.table {
            if entry.shape.iter().product::<usize>() != entry.len {
                return Err(bad(&format!("tensor {} shape/length disagree", entry.name)));
            }
            let end = offset + entry.len * 8;
            if end > bytes.len() {
                return Err(bad(&format!("tensor {} truncated", entry.name)));
            }
            let data = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            offset = end;
            tensors.insert(entry.name, StoredTensor { shape: entry.shape, data });
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
