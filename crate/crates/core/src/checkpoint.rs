//! Portable named-tensor files.
//!
//! Layout: the 8-byte magic `MTCKPT01`, a little-endian `u64` manifest
//! length, the JSON manifest, then the payload. The manifest lists every
//! tensor in payload order with its dtype, shape, byte offset and SHA-256
//! digest of its bytes, plus stage provenance and config / frozen-set digests.
//! Tensors are little-endian `f32` or `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{bytes_digest, ParamStore};
use crate::tensor::{DType, Tensor};

const MAGIC: &[u8; 8] = b"MTCKPT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub nbytes: usize,
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub provenance: String,
    #[serde(default)]
    pub config_digest: Option<String>,
    #[serde(default)]
    pub frozen_digest: Option<String>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub provenance: String,
    pub config_digest: Option<String>,
    pub frozen_digest: Option<String>,
    pub meta: BTreeMap<String, String>,
    tensors: BTreeMap<String, (DType, Tensor)>,
}

impl Checkpoint {
    pub fn new(provenance: impl Into<String>) -> Self {
        Self {
            provenance: provenance.into(),
            config_digest: None,
            frozen_digest: None,
            meta: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn from_params(store: &ParamStore, provenance: impl Into<String>) -> Self {
        let mut ck = Self::new(provenance);
        for (name, t) in store.iter() {
            ck.insert(name, DType::F64, t.clone());
        }
        ck
    }

    /// Stores `t`; with `DType::F32` the kept value is rounded so that the
    /// in-memory checkpoint equals what a reload returns.
    pub fn insert(&mut self, name: impl Into<String>, dtype: DType, t: Tensor) {
        let t = match dtype {
            DType::F64 => t,
            DType::F32 => t.map(|x| x as f32 as f64),
        };
        self.tensors.insert(name.into(), (dtype, t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_params(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, (_, t)) in &self.tensors {
            store.insert(name.clone(), t.clone());
        }
        store
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, (dtype, t)) in &self.tensors {
            let bytes = t.to_le_bytes(*dtype);
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: *dtype,
                shape: t.shape().to_vec(),
                offset: payload.len(),
                nbytes: bytes.len(),
                digest: bytes_digest(&bytes),
            });
            payload.extend_from_slice(&bytes);
        }
        let manifest = Manifest {
            provenance: self.provenance.clone(),
            config_digest: self.config_digest.clone(),
            frozen_digest: self.frozen_digest.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: String| Error::CorruptCheckpoint(m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing magic header".into()));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload_start = 16usize.checked_add(mlen).filter(|&e| e <= bytes.len());
        let Some(payload_start) = payload_start else {
            return Err(corrupt("manifest extends past end of file".into()));
        };
        let manifest: Manifest = serde_json::from_slice(&bytes[16..payload_start])
            .map_err(|e| corrupt(format!("unreadable manifest: {e}")))?;
        let payload = &bytes[payload_start..];
        let mut expected = 0usize;
        let mut tensors = BTreeMap::new();
        for e in &manifest.tensors {
            if e.offset != expected {
                return Err(corrupt(format!("tensor `{}` is not contiguous", e.name)));
            }
            let end = e.offset + e.nbytes;
            if end > payload.len() {
                return Err(corrupt(format!("payload truncated inside tensor `{}`", e.name)));
            }
            let raw = &payload[e.offset..end];
            if bytes_digest(raw) != e.digest {
                return Err(corrupt(format!("digest mismatch for tensor `{}`", e.name)));
            }
            let t = Tensor::from_le_bytes(e.shape.clone(), e.dtype, raw)
                .ok_or_else(|| corrupt(format!("tensor `{}` byte count disagrees with shape", e.name)))?;
            tensors.insert(e.name.clone(), (e.dtype, t));
            expected = end;
        }
        if expected != payload.len() {
            return Err(corrupt(format!("{} trailing payload bytes", payload.len() - expected)));
        }
        Ok(Self {
            provenance: manifest.provenance,
            config_digest: manifest.config_digest,
            frozen_digest: manifest.frozen_digest,
            meta: manifest.meta,
            tensors,
        })
    }

    /// SHA-256 of the serialized file.
    pub fn digest(&self) -> String {
        bytes_digest(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
