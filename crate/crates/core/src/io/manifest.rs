//! Tensor container shared by encoder weights, checkpoints and prototype banks.
//!
//! ```text
//! "ECOWGT01" | u32 format version | u64 header bytes | JSON header | blob
//! ```
//! The header holds string metadata and a directory of
//! `(name, shape, precision, offset, length)` entries into the blob. Tensor
//! data is little-endian.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::bank::Reader;
use crate::numerics::{Precision, Scalar, Tensor};

pub const MANIFEST_MAGIC: &[u8; 8] = b"ECOWGT01";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub precision: Precision,
    pub offset: u64,
    pub length: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightManifest {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
    pub blob: Vec<u8>,
}

impl WeightManifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.metadata.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Schema(format!("missing metadata entry {key:?}")))
    }

    pub fn meta_parsed<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::Schema(format!("metadata {key:?} has unparsable value {raw:?}")))
    }

    /// Appends a tensor at the end of the blob.
    pub fn push<T: Scalar>(&mut self, name: &str, tensor: &Tensor<T>) -> Result<()> {
        if self.entry(name).is_some() {
            return Err(Error::Schema(format!("duplicate tensor name {name:?}")));
        }
        let offset = self.blob.len() as u64;
        for &v in tensor.data() {
            v.write_le(&mut self.blob);
        }
        self.tensors.push(TensorEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            precision: T::PRECISION,
            offset,
            length: self.blob.len() as u64 - offset,
        });
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|e| e.name == name)
    }

    /// Decodes a tensor, converting precision when it differs from `T`.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let entry = self
            .entry(name)
            .ok_or_else(|| Error::Schema(format!("missing tensor {name:?}")))?;
        let bytes = &self.blob[entry.offset as usize..(entry.offset + entry.length) as usize];
        let data: Vec<T> = match entry.precision {
            Precision::Single => bytes
                .chunks_exact(4)
                .map(|b| T::lit(f32::read_le(b) as f64))
                .collect(),
            Precision::Double => bytes
                .chunks_exact(8)
                .map(|b| T::lit(f64::read_le(b)))
                .collect(),
        };
        Tensor::from_vec(&entry.shape, data)
    }

    /// Decodes a tensor and checks its shape.
    pub fn tensor_shaped<T: Scalar>(&self, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
        let t = self.tensor(name)?;
        if t.shape() != shape {
            return Err(Error::TensorShape {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        Ok(t)
    }

    fn validate(&self, blob_offset: usize) -> Result<()> {
        let mut names = HashSet::new();
        let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(self.tensors.len());
        for e in &self.tensors {
            if !names.insert(e.name.as_str()) {
                return Err(Error::Schema(format!("duplicate tensor name {:?}", e.name)));
            }
            let elems: usize = e.shape.iter().product();
            let expected = (elems * e.precision.byte_width()) as u64;
            if e.length != expected {
                return Err(Error::Schema(format!(
                    "tensor {:?}: length {} does not match shape {:?} ({expected} bytes)",
                    e.name, e.length, e.shape
                )));
            }
            let end = e.offset.checked_add(e.length).filter(|&end| end <= self.blob.len() as u64);
            let Some(end) = end else {
                return Err(Error::format(
                    blob_offset + e.offset as usize,
                    format!("tensor {:?} extends past the end of the blob", e.name),
                ));
            };
            spans.push((e.offset, end, &e.name));
        }
        spans.sort_unstable();
        for pair in spans.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(Error::Schema(format!(
                    "tensors {:?} and {:?} overlap",
                    pair[0].2, pair[1].2
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate(0)?;
        let header = serde_json::to_vec(&Header {
            metadata: self.metadata.clone(),
            tensors: self.tensors.clone(),
        })
        .map_err(|e| Error::Schema(format!("header serialization: {e}")))?;
        let mut out = Vec::with_capacity(20 + header.len() + self.blob.len());
        out.extend_from_slice(MANIFEST_MAGIC);
        out.extend_from_slice(&MANIFEST_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8, "magic")? != MANIFEST_MAGIC {
            return Err(Error::format(0, "bad magic, expected ECOWGT01"));
        }
        let version = r.u32("format version")?;
        if version != MANIFEST_VERSION {
            return Err(Error::format(8, format!("unsupported manifest version {version}")));
        }
        let header_len = r.u64("header length")?;
        let header_at = r.position();
        let header_len = usize::try_from(header_len)
            .map_err(|_| Error::format(12, "header length overflows"))?;
        let header_bytes = r.take(header_len, "header")?;
        let header: Header = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::format(header_at, format!("malformed header: {e}")))?;
        let blob_at = r.position();
        let blob = r.take(r.remaining(), "blob")?.to_vec();
        let manifest = Self {
            metadata: header.metadata,
            tensors: header.tensors,
            blob,
        };
        manifest.validate(blob_at)?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_mixed_precision() {
        let mut m = WeightManifest::new();
        m.set_meta("kind", "test");
        m.push("a", &Tensor::from_vec(&[2], vec![1.5f32, -2.0]).unwrap()).unwrap();
        m.push("b", &Tensor::from_vec(&[1, 3], vec![0.1f64, 0.2, 0.3]).unwrap()).unwrap();
        let bytes = m.to_bytes().unwrap();
        let back = WeightManifest::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.tensor::<f64>("b").unwrap().data(), &[0.1, 0.2, 0.3]);
        assert_eq!(back.tensor::<f64>("a").unwrap().data(), &[1.5, -2.0]);
    }

    #[test]
    fn rejects_duplicates_and_overlap() {
        let mut m = WeightManifest::new();
        m.push("a", &Tensor::from_vec(&[2], vec![1.0f32, 2.0]).unwrap()).unwrap();
        assert!(m.push("a", &Tensor::<f32>::zeros(&[1])).is_err());
        m.push("b", &Tensor::from_vec(&[2], vec![1.0f32, 2.0]).unwrap()).unwrap();
        m.tensors[1].offset = 4;
        assert!(matches!(m.to_bytes(), Err(Error::Schema(_))));
        m.tensors[1].offset = 12;
        assert!(matches!(m.to_bytes(), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_blob_is_a_format_error() {
        let mut m = WeightManifest::new();
        m.push("a", &Tensor::from_vec(&[4], vec![1.0f32; 4]).unwrap()).unwrap();
        let bytes = m.to_bytes().unwrap();
        assert!(matches!(
            WeightManifest::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Format { .. })
        ));
        assert!(matches!(WeightManifest::from_bytes(&bytes[..10]), Err(Error::Format { .. })));
    }
}
