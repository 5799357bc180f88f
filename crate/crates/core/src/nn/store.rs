//! Named tensors and the single-file container they are saved in.
//!
//! Layout: 8-byte magic, u32 version, u64 header length (all little endian),
//! a JSON header listing every tensor's name, dtype, shape, frozen flag and
//! byte range, then the raw little-endian tensor bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Param, Real};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DGLSPRM\0";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub frozen: bool,
    /// Little-endian element bytes.
    pub data: Vec<u8>,
}

impl StoredTensor {
    pub fn from_array<T: Real>(a: &ArrayD<T>, frozen: bool) -> Self {
        let mut data = Vec::with_capacity(a.len() * T::BYTES);
        for v in a.iter() {
            v.write_le(&mut data);
        }
        Self {
            shape: a.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            frozen,
            data,
        }
    }

    pub fn to_array<T: Real>(&self) -> Result<ArrayD<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Incompatible(format!(
                "stored dtype {} but {} requested",
                self.dtype,
                T::DTYPE
            )));
        }
        let values: Vec<T> = self.data.chunks_exact(T::BYTES).map(T::read_le).collect();
        ArrayD::from_shape_vec(IxDyn(&self.shape), values).map_err(|e| Error::Incompatible(e.to_string()))
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    pub tensors: BTreeMap<String, StoredTensor>,
}

impl ParameterStore {
    pub fn insert_param<T: Real>(&mut self, name: &str, p: &Param<T>) {
        self.tensors.insert(name.to_string(), StoredTensor::from_array(&p.value, p.frozen));
    }

    pub fn insert(&mut self, name: impl Into<String>, t: StoredTensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Adds every tensor of `other` under `prefix.`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &ParameterStore) {
        for (k, v) in &other.tensors {
            self.tensors.insert(format!("{prefix}.{k}"), v.clone());
        }
    }

    /// Tensors whose names start with `prefix.`, with the prefix stripped.
    pub fn sub(&self, prefix: &str) -> ParameterStore {
        let p = format!("{prefix}.");
        ParameterStore {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and bytes, in name order.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.tensors {
            h.update(k.as_bytes());
            h.update([0u8]);
            for d in &v.shape {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(v.dtype.as_bytes());
            h.update(&v.data);
        }
        hex::encode(h.finalize())
    }
}

/// A parameter store plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub metadata: serde_json::Value,
    pub tensors: ParameterStore,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    frozen: bool,
    offset: u64,
    nbytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    metadata: serde_json::Value,
    tensors: Vec<HeaderEntry>,
}

pub fn write_container(path: &Path, c: &Container) -> Result<()> {
    let mut entries = Vec::with_capacity(c.tensors.len());
    let mut offset = 0u64;
    for (name, t) in &c.tensors.tensors {
        entries.push(HeaderEntry {
            name: name.clone(),
            dtype: t.dtype.clone(),
            shape: t.shape.clone(),
            frozen: t.frozen,
            offset,
            nbytes: t.data.len() as u64,
        });
        offset += t.data.len() as u64;
    }
    let header = serde_json::to_vec(&Header {
        metadata: c.metadata.clone(),
        tensors: entries,
    })?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write to a sibling temp file, then rename, so a crash never leaves a torn file
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut buf = Vec::with_capacity(20 + header.len() + offset as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for t in c.tensors.tensors.values() {
        buf.extend_from_slice(&t.data);
    }
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let bad = |reason: &str| Error::corrupt(path, reason);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a parameter container (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CONTAINER_VERSION {
        return Err(bad(&format!("unsupported container version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body_start = 20usize
        .checked_add(hlen)
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..body_start]).map_err(|e| bad(&e.to_string()))?;
    let blob = &bytes[body_start..];
    let mut tensors = ParameterStore::default();
    for e in header.tensors {
        let elem = match e.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(bad(&format!("unknown dtype {other}"))),
        };
        let expected = e.shape.iter().product::<usize>() * elem;
        let (start, end) = (e.offset as usize, (e.offset + e.nbytes) as usize);
        if e.nbytes as usize != expected || end > blob.len() {
            return Err(bad(&format!("tensor {} has inconsistent size", e.name)));
        }
        tensors.insert(
            e.name,
            StoredTensor {
                shape: e.shape,
                dtype: e.dtype,
                frozen: e.frozen,
                data: blob[start..end].to_vec(),
            },
        );
    }
    Ok(Container {
        metadata: header.metadata,
        tensors,
    })
}

pub fn save_params(store: &ParameterStore, path: &Path) -> Result<()> {
    write_container(
        path,
        &Container {
            metadata: serde_json::Value::Null,
            tensors: store.clone(),
        },
    )
}

pub fn load_params(path: &Path) -> Result<ParameterStore> {
    Ok(read_container(path)?.tensors)
}
