//! Tensor container: `[u64 LE header length][JSON header][raw little-endian data]`.
//!
//! The header maps each tensor name to `{"dtype", "shape", "data_offsets"}`,
//! offsets counted from the first byte after the header. Tensors are written
//! in name order so identical inputs produce identical files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "F32")]
    F32,
    #[serde(rename = "F64")]
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlob {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl TensorBlob {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Encodes `values` (row-major) at the given storage precision.
    pub fn from_f64(dtype: DType, shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {numel} values, got {}",
                values.len()
            )));
        }
        let mut data = Vec::with_capacity(numel * dtype.size());
        match dtype {
            DType::F32 => values
                .iter()
                .for_each(|v| data.extend_from_slice(&(*v as f32).to_le_bytes())),
            DType::F64 => values
                .iter()
                .for_each(|v| data.extend_from_slice(&v.to_le_bytes())),
        }
        Ok(Self { dtype, shape, data })
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self.dtype {
            DType::F32 => self
                .data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => self
                .data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    dtype: DType,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

pub type TensorMap = BTreeMap<String, TensorBlob>;

pub fn encode(tensors: &TensorMap) -> Result<Vec<u8>> {
    let mut header = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in tensors {
        let expected = t.numel() * t.dtype.size();
        if t.data.len() != expected {
            return Err(Error::Shape(format!(
                "tensor {name}: {} bytes for shape {:?} ({expected} expected)",
                t.data.len(),
                t.shape
            )));
        }
        let end = offset + t.data.len() as u64;
        header.insert(
            name.as_str(),
            HeaderEntry {
                dtype: t.dtype,
                shape: t.shape.clone(),
                data_offsets: [offset, end],
            },
        );
        offset = end;
    }
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors.values() {
        out.extend_from_slice(&t.data);
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<TensorMap> {
    if bytes.len() < 8 {
        return Err(Error::Format(
            "file shorter than the 8-byte header length".into(),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let data_start = 8u64
        .checked_add(header_len)
        .filter(|&s| s <= bytes.len() as u64)
        .ok_or_else(|| Error::Format(format!("header length {header_len} exceeds file size")))?
        as usize;
    let header: BTreeMap<String, serde_json::Value> = serde_json::from_slice(&bytes[8..data_start])
        .map_err(|e| Error::Format(format!("unreadable header: {e}")))?;
    let data = &bytes[data_start..];

    let mut tensors = TensorMap::new();
    for (name, value) in header {
        if name == "__metadata__" {
            continue;
        }
        let entry: HeaderEntry = serde_json::from_value(value)
            .map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        let [begin, end] = entry.data_offsets;
        if begin > end || end > data.len() as u64 {
            return Err(Error::Format(format!(
                "tensor {name}: offsets [{begin}, {end}] outside {} data bytes",
                data.len()
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let expected = numel * entry.dtype.size();
        if (end - begin) as usize != expected {
            return Err(Error::Format(format!(
                "tensor {name}: {} bytes for shape {:?} of {:?} ({expected} expected)",
                end - begin,
                entry.shape,
                entry.dtype
            )));
        }
        tensors.insert(
            name,
            TensorBlob {
                dtype: entry.dtype,
                shape: entry.shape,
                data: data[begin as usize..end as usize].to_vec(),
            },
        );
    }
    Ok(tensors)
}

pub fn read(path: &Path) -> Result<TensorMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| e.context(&path.display().to_string()))
}

pub fn write(path: &Path, tensors: &TensorMap) -> Result<()> {
    let bytes = encode(tensors)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
