//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every indexed tensor as little-endian `f64` in header order.
//! The header carries the run config, its hashes, the RNG state and the
//! optimizer step; Adam moments are stored as tensors.

use std::io::{Read, Write};
use std::path::Path;

use numcore::{Adam, AdamConfig, ParamStore, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MEDKGCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Slot {
    Param,
    AdamFirst,
    AdamSecond,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    slot: Slot,
    rows: usize,
    cols: usize,
    frozen: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    config_hash: String,
    family_hash: String,
    rng: Option<ChaCha8Rng>,
    adam: Option<(AdamConfig, u64)>,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// `pretrain` or `task`.
    pub kind: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    /// Hash of the config parts a compatible consumer must share.
    pub family_hash: String,
    pub rng: Option<ChaCha8Rng>,
    pub optimizer: Option<Adam>,
    /// Kind-specific data such as the task spec or training history.
    pub meta: serde_json::Value,
    pub store: ParamStore,
}

/// Hex SHA-256 of the canonical (key-sorted, compact) JSON of `value`.
pub fn canonical_hash<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(sha256_hex(&serde_json::to_vec(&v)?))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut data: Vec<&Tensor> = Vec::new();
        let mut push = |name: &str, slot: Slot, t: &'static str, tensor: &Tensor, frozen: bool| -> Result<()> {
            let (rows, cols) = (tensor.rows(), tensor.cols());
            if rows * cols != tensor.data().len() {
                return Err(Error::Invalid(format!("{t} tensor `{name}` has an inconsistent shape")));
            }
            tensors.push(TensorEntry { name: name.to_string(), slot, rows, cols, frozen });
            Ok(())
        };
        for (name, t) in self.store.iter() {
            push(name, Slot::Param, "parameter", t, self.store.is_frozen(name))?;
            data.push(t);
        }
        if let Some(adam) = &self.optimizer {
            for (name, t) in &adam.first {
                push(name, Slot::AdamFirst, "moment", t, false)?;
                data.push(t);
            }
            for (name, t) in &adam.second {
                push(name, Slot::AdamSecond, "moment", t, false)?;
                data.push(t);
            }
        }
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            family_hash: self.family_hash.clone(),
            rng: self.rng.clone(),
            adam: self.optimizer.as_ref().map(|a| (a.config, a.step)),
            meta: self.meta.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * data.iter().map(|t| t.data().len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in data {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], source_name: &str) -> Result<Self> {
        let bad = |detail: String| Error::Malformed { source_name: source_name.to_string(), line: 0, detail };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Incompatible(format!("{source_name}: format version {version}, expected {FORMAT_VERSION}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + len).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        let mut rest = &bytes[20 + len..];
        let mut store = ParamStore::new();
        let mut adam = header.adam.map(|(config, step)| {
            let mut a = Adam::new(config);
            a.step = step;
            a
        });
        for e in &header.tensors {
            let n = e.rows * e.cols;
            if rest.len() < 8 * n {
                return Err(bad(format!("tensor `{}` truncated", e.name)));
            }
            let values: Vec<f64> = rest[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            rest = &rest[8 * n..];
            let t = Tensor::from_matrix(e.rows, e.cols, values);
            match e.slot {
                Slot::Param if e.frozen => store.insert_frozen(e.name.clone(), t),
                Slot::Param => store.insert(e.name.clone(), t),
                Slot::AdamFirst | Slot::AdamSecond => {
                    let a = adam.as_mut().ok_or_else(|| bad("optimizer moments without optimizer state".into()))?;
                    let map = if e.slot == Slot::AdamFirst { &mut a.first } else { &mut a.second };
                    map.insert(e.name.clone(), t);
                }
            }
        }
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            config_hash: header.config_hash,
            family_hash: header.family_hash,
            rng: header.rng,
            optimizer: adam,
            meta: header.meta,
            store,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(format!("checkpoint {} not found", path.display())),
            _ => Error::Io(e),
        })?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Errors unless this checkpoint has `kind` and the expected family.
    pub fn ensure_compatible(&self, kind: &str, family_hash: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Incompatible(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        if self.family_hash != family_hash {
            return Err(Error::Incompatible(format!("config family {} does not match {}", self.family_hash, family_hash)));
        }
        Ok(())
    }
}
