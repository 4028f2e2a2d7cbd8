//! Versioned checkpoint container shared by every trained component.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "RNCTCKPT"
//! version    u32
//! header_len u64
//! header     JSON: {kind, config, meta, tensors: [{name, dtype, shape, offset, len}]}
//! payload    raw little-endian tensor data, offsets relative to payload start
//! checksum   32 bytes SHA-256 over everything above
//! ```
//!
//! The checksum is verified before anything is parsed, so a corrupted file
//! never yields partial state.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 8] = b"RNCTCKPT";
pub const CONTAINER_VERSION: u32 = 1;

/// Host copy of a tensor in its native precision.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub values: TensorValues,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorValues {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let shape = t.dims().to_vec();
        let flat = t.flatten_all()?;
        let values = match t.dtype() {
            DType::F64 => TensorValues::F64(flat.to_vec1::<f64>()?),
            _ => TensorValues::F32(flat.to_dtype(DType::F32)?.to_vec1::<f32>()?),
        };
        Ok(Self { shape, values })
    }

    pub fn f32(shape: Vec<usize>, values: Vec<f32>) -> Self {
        Self {
            shape,
            values: TensorValues::F32(values),
        }
    }

    pub fn f64(shape: Vec<usize>, values: Vec<f64>) -> Self {
        Self {
            shape,
            values: TensorValues::F64(values),
        }
    }

    pub fn to_tensor(&self, shape: &[usize]) -> Result<Tensor> {
        Ok(match &self.values {
            TensorValues::F32(v) => Tensor::from_slice(v, shape, &Device::Cpu)?,
            TensorValues::F64(v) => Tensor::from_slice(v, shape, &Device::Cpu)?,
        })
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match &self.values {
            TensorValues::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorValues::F64(v) => v.clone(),
        }
    }

    fn dtype_name(&self) -> &'static str {
        match self.values {
            TensorValues::F32(_) => "f32",
            TensorValues::F64(_) => "f64",
        }
    }

    fn bytes(&self) -> Vec<u8> {
        match &self.values {
            TensorValues::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorValues::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// An in-memory checkpoint: a kind tag, free-form config and metadata, and named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub config: serde_json::Value,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, TensorData>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            config: serde_json::Value::Null,
            meta: serde_json::Value::Null,
            tensors: BTreeMap::new(),
        }
    }

    /// Inserts every tensor of `group` under `prefix/name`.
    pub fn insert_group(&mut self, prefix: &str, group: &BTreeMap<String, TensorData>) {
        for (k, v) in group {
            self.tensors.insert(format!("{prefix}/{k}"), v.clone());
        }
    }

    /// Tensors stored under `prefix/`, with the prefix stripped.
    pub fn group(&self, prefix: &str) -> BTreeMap<String, TensorData> {
        let p = format!("{prefix}/");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    /// Stores a whole container under `prefix`: tensors as `prefix/...`, and its
    /// kind, config and meta under `meta[prefix]`.
    pub fn insert_nested(&mut self, prefix: &str, inner: &Container) {
        self.insert_group(prefix, &inner.tensors);
        if !self.meta.is_object() {
            self.meta = serde_json::json!({});
        }
        self.meta[prefix] = serde_json::json!({
            "kind": inner.kind,
            "config": inner.config,
            "meta": inner.meta,
        });
    }

    /// Inverse of [`Container::insert_nested`].
    pub fn nested(&self, prefix: &str) -> Result<Container> {
        let head = &self.meta[prefix];
        let kind = head["kind"]
            .as_str()
            .ok_or_else(|| Error::Config(format!("no nested '{prefix}' entry in '{}' container", self.kind)))?;
        Ok(Container {
            kind: kind.to_string(),
            config: head["config"].clone(),
            meta: head["meta"].clone(),
            tensors: self.group(prefix),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let b = t.bytes();
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: t.dtype_name().to_string(),
                shape: t.shape.clone(),
                offset: payload.len(),
                len: b.len(),
            });
            payload.extend_from_slice(&b);
        }
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(header.len() + payload.len() + 52);
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: origin.to_path_buf(),
            reason,
        };
        if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != CONTAINER_MAGIC {
            return Err(bad("not a checkpoint container".into()));
        }
        let body = &bytes[..bytes.len() - 32];
        let stored = &bytes[bytes.len() - 32..];
        let computed = Sha256::digest(body);
        if computed.as_slice() != stored {
            return Err(Error::Checksum {
                path: origin.to_path_buf(),
                stored: hex(stored),
                computed: hex(&computed),
            });
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != CONTAINER_VERSION {
            return Err(bad(format!("unsupported container version {version}")));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        if 20 + hlen > body.len() {
            return Err(bad("header length exceeds file".into()));
        }
        let header: Header = serde_json::from_slice(&body[20..20 + hlen])?;
        let payload = &body[20 + hlen..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let raw = payload
                .get(e.offset..e.offset + e.len)
                .ok_or_else(|| bad(format!("tensor {} out of bounds", e.name)))?;
            let numel: usize = e.shape.iter().product();
            let values = match e.dtype.as_str() {
                "f32" if raw.len() == numel * 4 => TensorValues::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                "f64" if raw.len() == numel * 8 => TensorValues::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                d => return Err(bad(format!("tensor {} has bad dtype/length ({d})", e.name))),
            };
            tensors.insert(e.name, TensorData { shape: e.shape, values });
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }

    /// Writes atomically: a temporary file in the target directory is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        tmp.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Config(format!(
                "expected a '{kind}' checkpoint, found '{}'",
                self.kind
            )));
        }
        Ok(())
    }

    /// SHA-256 over the serialized tensors of the given group (or all tensors).
    pub fn tensor_hash(&self, prefix: Option<&str>) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.tensors {
            if prefix.map_or(true, |p| k.starts_with(p)) {
                h.update(k.as_bytes());
                h.update(v.bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
