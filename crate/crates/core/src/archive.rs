//! Versioned tensor container shared by checkpoints, dictionaries,
//! object-representation dumps and heatmap exports.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"SLTA"
//! version u32
//! hlen    u64          length of the JSON header in bytes
//! header  [u8; hlen]   {"meta": {...}, "tensors": [{name, dtype, shape, offset, nbytes}]}
//! blob    [u8]         raw tensor payloads, offsets relative to blob start
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SLTA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
    I64(ArrayD<i64>),
}

impl Tensor {
    fn dtype(&self) -> &'static str {
        match self {
            Tensor::F32(_) => "f32",
            Tensor::F64(_) => "f64",
            Tensor::I64(_) => "i64",
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::F32(a) => a.shape(),
            Tensor::F64(a) => a.shape(),
            Tensor::I64(a) => a.shape(),
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        match self {
            Tensor::F32(a) => a.iter().flat_map(|v| v.to_le_bytes()).collect(),
            Tensor::F64(a) => a.iter().flat_map(|v| v.to_le_bytes()).collect(),
            Tensor::I64(a) => a.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus a free-form JSON metadata block.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorArchive {
    pub meta: Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl TensorArchive {
    pub fn new(meta: Value) -> Self {
        Self {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn f32(&self, name: &str) -> Result<&ArrayD<f32>> {
        match self.tensors.get(name) {
            Some(Tensor::F32(a)) => Ok(a),
            Some(other) => Err(Error::Shape(format!(
                "tensor `{name}` has dtype {}, expected f32",
                other.dtype()
            ))),
            None => Err(Error::Shape(format!("missing tensor `{name}`"))),
        }
    }

    pub fn f64(&self, name: &str) -> Result<&ArrayD<f64>> {
        match self.tensors.get(name) {
            Some(Tensor::F64(a)) => Ok(a),
            Some(other) => Err(Error::Shape(format!(
                "tensor `{name}` has dtype {}, expected f64",
                other.dtype()
            ))),
            None => Err(Error::Shape(format!("missing tensor `{name}`"))),
        }
    }

    pub fn i64(&self, name: &str) -> Result<&ArrayD<i64>> {
        match self.tensors.get(name) {
            Some(Tensor::I64(a)) => Ok(a),
            Some(other) => Err(Error::Shape(format!(
                "tensor `{name}` has dtype {}, expected i64",
                other.dtype()
            ))),
            None => Err(Error::Shape(format!("missing tensor `{name}`"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, tensor) in &self.tensors {
            let bytes = tensor.to_bytes();
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: tensor.dtype().to_string(),
                shape: tensor.shape().to_vec(),
                offset: blob.len(),
                nbytes: bytes.len(),
            });
            blob.extend_from_slice(&bytes);
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors: entries,
        })?;

        let mut out = Vec::with_capacity(16 + header.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::corrupt(origin, reason);
        if bytes.len() < 16 {
            return Err(corrupt("file shorter than fixed preamble"));
        }
        if &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if hlen > body.len() {
            return Err(corrupt("header length exceeds file size"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| Error::corrupt(origin, format!("header: {e}")))?;
        let blob = &body[hlen..];

        let mut tensors = BTreeMap::new();
        for entry in header.tensors {
            let end = entry
                .offset
                .checked_add(entry.nbytes)
                .ok_or_else(|| corrupt("tensor extent overflows"))?;
            if end > blob.len() {
                return Err(Error::corrupt(
                    origin,
                    format!("tensor `{}` truncated", entry.name),
                ));
            }
            let raw = &blob[entry.offset..end];
            let count: usize = entry.shape.iter().product();
            let shape = IxDyn(&entry.shape);
            let tensor = match entry.dtype.as_str() {
                "f32" => Tensor::F32(decode(raw, count, shape, f32::from_le_bytes, origin, &entry.name)?),
                "f64" => Tensor::F64(decode(raw, count, shape, f64::from_le_bytes, origin, &entry.name)?),
                "i64" => Tensor::I64(decode(raw, count, shape, i64::from_le_bytes, origin, &entry.name)?),
                other => {
                    return Err(Error::corrupt(origin, format!("unknown dtype `{other}`")));
                }
            };
            tensors.insert(entry.name, tensor);
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes =
            fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn decode<T, const N: usize>(
    raw: &[u8],
    count: usize,
    shape: IxDyn,
    from: fn([u8; N]) -> T,
    origin: &Path,
    name: &str,
) -> Result<ArrayD<T>> {
    if raw.len() != count * N {
        return Err(Error::corrupt(
            origin,
            format!("tensor `{name}` payload size does not match its shape"),
        ));
    }
    let values: Vec<T> = raw
        .chunks_exact(N)
        .map(|c| from(c.try_into().unwrap()))
        .collect();
    ArrayD::from_shape_vec(shape, values).map_err(|e| Error::corrupt(origin, e.to_string()))
}
