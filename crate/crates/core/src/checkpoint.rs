//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"LUMICKPT" | u64 header_len | header JSON (UTF-8) | tensor payload
//! ```
//!
//! The header is `{"kind": str, "meta": object, "tensors": [{"name", "partition",
//! "dtype", "shape", "offset", "len"}]}`; `offset`/`len` are byte ranges into the
//! payload. Model-specific fields (version tags, dims, schedule...) live in
//! `meta` and are validated by the owning module.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::nn::Partition;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"LUMICKPT";

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub partition: Option<Partition>,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl TensorRecord {
    pub fn from_tensor(name: &str, partition: Option<Partition>, t: &Tensor) -> Result<Self> {
        let dtype = match t.dtype() {
            DType::F64 => DType::F64,
            _ => DType::F32,
        };
        Ok(Self {
            name: name.to_string(),
            partition,
            dtype,
            shape: t.dims().to_vec(),
            values: t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?,
        })
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.values.clone(), self.shape.as_slice(), device)?.to_dtype(dtype)?)
    }
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    partition: Option<String>,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn new(kind: &str, meta: serde_json::Value, tensors: Vec<TensorRecord>) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let offset = payload.len();
            match t.dtype {
                DType::F64 => t.values.iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
                _ => t
                    .values
                    .iter()
                    .for_each(|v| payload.extend_from_slice(&(*v as f32).to_le_bytes())),
            }
            entries.push(Entry {
                name: t.name.clone(),
                partition: t.partition.map(|p| p.as_str().to_string()),
                dtype: if t.dtype == DType::F64 { "f64" } else { "f32" }.to_string(),
                shape: t.shape.clone(),
                offset,
                len: payload.len() - offset,
            });
        }
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::checkpoint("not a checkpoint file (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if hlen > body.len() {
            return Err(Error::checkpoint("truncated checkpoint header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| Error::checkpoint(format!("corrupt checkpoint header: {e}")))?;
        let payload = &body[hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let end = e.offset.checked_add(e.len).filter(|&end| end <= payload.len());
            let Some(end) = end else {
                return Err(Error::checkpoint(format!("tensor {} runs past the payload", e.name)));
            };
            let raw = &payload[e.offset..end];
            let (dtype, values): (DType, Vec<f64>) = match e.dtype.as_str() {
                "f32" => (
                    DType::F32,
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                        .collect(),
                ),
                "f64" => (
                    DType::F64,
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                other => return Err(Error::checkpoint(format!("unsupported dtype {other}"))),
            };
            if values.len() != e.shape.iter().product::<usize>() {
                return Err(Error::checkpoint(format!("tensor {} has the wrong element count", e.name)));
            }
            tensors.push(TensorRecord {
                name: e.name,
                partition: e.partition.as_deref().map(Partition::parse).transpose()?,
                dtype,
                shape: e.shape,
                values,
            });
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)
            .map_err(|e| Error::checkpoint(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)))
        }
    }

    pub fn meta_field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::checkpoint(format!("checkpoint header lacks {key:?}")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::checkpoint(format!("bad {key:?} in header: {e}")))
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint::new(
            "test",
            serde_json::json!({"version": 3}),
            vec![
                TensorRecord {
                    name: "a".into(),
                    partition: Some(Partition::Base),
                    dtype: DType::F32,
                    shape: vec![2, 2],
                    values: vec![1.0, -2.5, 0.0, 4.0],
                },
                TensorRecord {
                    name: "b".into(),
                    partition: None,
                    dtype: DType::F64,
                    shape: vec![1],
                    values: vec![std::f64::consts::PI],
                },
            ],
        )
    }

    #[test]
    fn round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        sample().save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.kind, "test");
        assert_eq!(back.meta_field::<u32>("version").unwrap(), 3);
        assert_eq!(back.tensors, sample().tensors);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        let mut truncated = sample().to_bytes().unwrap();
        truncated.truncate(truncated.len() - 3);
        assert!(Checkpoint::from_bytes(&truncated).is_err());
    }
}
