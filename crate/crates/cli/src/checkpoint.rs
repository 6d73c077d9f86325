//! Self-describing checkpoint container.
//!
//! Layout: the 8-byte magic `SRLCKPT\0`, the header length as a
//! little-endian `u64`, a JSON header, then every tensor's values as
//! little-endian `f64` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use sepsis_rl::numerics::{ParamSet, Tensor};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"SRLCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("version mismatch: file has format {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: String, found: String },
    #[error("schema mismatch: checkpoint was written for schema {found}, current schema is {expected}")]
    SchemaMismatch { expected: String, found: String },
    #[error("corrupt header: {0}")]
    Header(String),
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
    #[error("missing tensor {0}")]
    MissingTensor(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub kind: String,
    pub schema_fingerprint: String,
    pub seed: u64,
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
    pub meta: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub schema_fingerprint: String,
    pub seed: u64,
    pub config_hash: String,
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, schema_fingerprint: impl Into<String>, seed: u64, config_hash: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            schema_fingerprint: schema_fingerprint.into(),
            seed,
            config_hash: config_hash.into(),
            meta: Value::Object(Default::default()),
            tensors: Vec::new(),
        }
    }

    pub fn with_meta(mut self, meta: Value) -> Self {
        self.meta = meta;
        self
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    /// Adds every parameter of `set` under `prefix/<name>`.
    pub fn push_params(&mut self, prefix: &str, set: &ParamSet) {
        for (name, value) in set.named_values() {
            self.push(format!("{prefix}/{name}"), value);
        }
    }

    pub fn tensor(&self, name: &str) -> std::result::Result<&Tensor, CheckpointError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::MissingTensor(name.into()))
    }

    /// Tensors stored under `prefix/`, with the prefix stripped.
    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let p = format!("{prefix}/");
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn expect_kind(&self, kind: &str) -> std::result::Result<(), CheckpointError> {
        if self.kind != kind {
            return Err(CheckpointError::KindMismatch {
                expected: kind.into(),
                found: self.kind.clone(),
            });
        }
        Ok(())
    }

    pub fn expect_schema(&self, fingerprint: &str) -> std::result::Result<(), CheckpointError> {
        if self.schema_fingerprint != fingerprint {
            return Err(CheckpointError::SchemaMismatch {
                expected: fingerprint.into(),
                found: self.schema_fingerprint.clone(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            schema_fingerprint: self.schema_fingerprint.clone(),
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let payload: usize = self.tensors.iter().map(|(_, t)| t.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if len > body.len() {
            return Err(CheckpointError::Header(format!("declared {len} header bytes, file has {}", body.len())));
        }
        let header: Header = serde_json::from_slice(&body[..len]).map_err(|e| CheckpointError::Header(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: header.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let payload = &body[len..];
        let sizes: Vec<usize> = header.tensors.iter().map(|e| e.shape.iter().product()).collect();
        let expected: usize = sizes.iter().sum::<usize>() * 8;
        if payload.len() != expected {
            return Err(CheckpointError::CorruptPayload(format!(
                "shapes declare {expected} bytes, found {}",
                payload.len()
            )));
        }
        let mut names = std::collections::HashSet::new();
        let mut tensors = Vec::with_capacity(sizes.len());
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for (entry, n) in header.tensors.into_iter().zip(sizes) {
            if !names.insert(entry.name.clone()) {
                return Err(CheckpointError::Header(format!("tensor {} listed twice", entry.name)));
            }
            let data: Vec<f64> = values.by_ref().take(n).collect();
            let t = Tensor::new(entry.shape, data).map_err(|e| CheckpointError::CorruptPayload(e.to_string()))?;
            tensors.push((entry.name, t));
        }
        Ok(Self {
            kind: header.kind,
            schema_fingerprint: header.schema_fingerprint,
            seed: header.seed,
            config_hash: header.config_hash,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::manifest::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|source| CliError::Checkpoint {
            path: path.to_path_buf(),
            source,
        })
    }
}
