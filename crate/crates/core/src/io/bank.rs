//! Embedding bank file format.
//!
//! ```text
//! "ECOBANK1" | u32 version=1 | u32 K | u32 d | u32 records
//! per class:  u16 name bytes | UTF-8 name | u16 token count | u32 ids…
//! per record: u32 label | d × f32
//! ```
//! All integers and floats are little-endian.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::prompt::{ClassTokenTable, ClassTokens};

pub const BANK_MAGIC: &[u8; 8] = b"ECOBANK1";
pub const BANK_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct BankRecord {
    pub label: u32,
    pub vector: Vec<f32>,
}

/// Labeled image features plus the class table that defines the task.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    pub dim: usize,
    pub classes: ClassTokenTable,
    pub records: Vec<BankRecord>,
}

impl EmbeddingBank {
    pub fn new(dim: usize, classes: ClassTokenTable, records: Vec<BankRecord>) -> Result<Self> {
        let bank = Self {
            dim,
            classes,
            records,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.classes.len();
        for (i, r) in self.records.iter().enumerate() {
            if r.label as usize >= k {
                return Err(Error::Contract(format!(
                    "record {i} has label {} but only {k} classes",
                    r.label
                )));
            }
            if r.vector.len() != self.dim {
                return Err(Error::Dimension {
                    op: "bank record",
                    left: vec![self.dim],
                    right: vec![r.vector.len()],
                });
            }
            if !r.vector.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("bank record {i}")));
            }
            if r.vector.iter().all(|&v| v == 0.0) {
                return Err(Error::DegenerateFeature(format!("bank record {i}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for r in &self.records {
            counts[r.label as usize] += 1;
        }
        counts
    }

    /// Record indices grouped by label, in file order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.classes.len()];
        for (i, r) in self.records.iter().enumerate() {
            by_class[r.label as usize].push(i);
        }
        by_class
    }

    /// Rows `[indices.len(), d]` converted to `T`.
    pub fn gather<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        let data = indices
            .iter()
            .flat_map(|&i| self.records[i].vector.iter().map(|&v| T::lit(v as f64)))
            .collect();
        Tensor::from_vec(&[indices.len(), self.dim], data).expect("rows have bank dimension")
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.records[i].label as usize).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        write_bank(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        read_bank(bytes)
    }
}

pub fn write_bank(bank: &EmbeddingBank) -> Result<Vec<u8>> {
    bank.validate()?;
    let mut out = Vec::with_capacity(24 + bank.records.len() * (4 + 4 * bank.dim));
    out.extend_from_slice(BANK_MAGIC);
    for v in [
        BANK_VERSION,
        bank.classes.len() as u32,
        bank.dim as u32,
        bank.records.len() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for c in &bank.classes.classes {
        let name = c.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Config(format!("class name {:?} too long", c.name)))?;
        let token_len = u16::try_from(c.tokens.len())
            .map_err(|_| Error::Config(format!("class {:?} has too many tokens", c.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&token_len.to_le_bytes());
        for id in &c.tokens {
            out.extend_from_slice(&id.to_le_bytes());
        }
    }
    for r in &bank.records {
        out.extend_from_slice(&r.label.to_le_bytes());
        for v in &r.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Little-endian cursor that reports the byte offset of any failure.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn read_bank(bytes: &[u8]) -> Result<EmbeddingBank> {
    let mut r = Reader::new(bytes);
    if r.take(8, "magic")? != BANK_MAGIC {
        return Err(Error::format(0, "bad magic, expected ECOBANK1"));
    }
    let version = r.u32("version")?;
    if version != BANK_VERSION {
        return Err(Error::format(8, format!("unsupported bank version {version}")));
    }
    let k = r.u32("class count")? as usize;
    let dim = r.u32("dimension")? as usize;
    let n = r.u32("record count")? as usize;

    let mut classes = Vec::with_capacity(k.min(1 << 16));
    for ci in 0..k {
        let what = format!("class {ci}");
        let name_len = r.u16(&what)? as usize;
        let at = r.position();
        let name = std::str::from_utf8(r.take(name_len, &what)?)
            .map_err(|_| Error::format(at, format!("class {ci} name is not UTF-8")))?
            .to_string();
        let token_len = r.u16(&what)? as usize;
        let tokens = (0..token_len)
            .map(|_| r.u32(&what))
            .collect::<Result<Vec<_>>>()?;
        classes.push(ClassTokens { name, tokens });
    }

    let record_bytes = 4 + 4 * dim;
    let mut records = Vec::with_capacity(n.min(r.remaining() / record_bytes.max(1) + 1));
    for i in 0..n {
        let chunk = r.take(record_bytes, &format!("record {i}"))?;
        let label = u32::from_le_bytes(chunk[..4].try_into().unwrap());
        let vector = chunk[4..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        records.push(BankRecord { label, vector });
    }
    if r.remaining() != 0 {
        return Err(Error::format(
            r.position(),
            format!("{} trailing bytes after last record", r.remaining()),
        ));
    }
    let bank = EmbeddingBank {
        dim,
        classes: ClassTokenTable::new(classes),
        records,
    };
    bank.validate()?;
    Ok(bank)
}
