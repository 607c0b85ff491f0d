use std::collections::HashSet;
use std::path::Path;

use super::binary::{count_u32, Reader, Writer};
use super::{read_file, write_atomic, FormatError};

pub const MAGIC: &[u8; 4] = b"SEVB";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub name: String,
    pub values: Vec<f32>,
}

/// Named embeddings of one dimension.
///
/// Layout: magic `SEVB`, `u32` version, `u32` count, `u32` dim, then `count`
/// records of `u16` name length, UTF-8 name and `dim` `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub dim: u32,
    pub records: Vec<EmbeddingRecord>,
}

impl EmbeddingFile {
    pub fn new(dim: usize, records: Vec<EmbeddingRecord>) -> Result<Self, FormatError> {
        let f = Self {
            dim: count_u32(dim, "dimension")?,
            records,
        };
        f.validate()?;
        Ok(f)
    }

    fn validate(&self) -> Result<(), FormatError> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if r.values.len() != self.dim as usize {
                return Err(FormatError::Invalid(format!(
                    "record {:?} has {} values for dimension {}",
                    r.name,
                    r.values.len(),
                    self.dim
                )));
            }
            if !seen.insert(r.name.as_str()) {
                return Err(FormatError::Invalid(format!("duplicate name {:?}", r.name)));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>, FormatError> {
        self.validate()?;
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(count_u32(self.records.len(), "record count")?);
        w.u32(self.dim);
        for r in &self.records {
            w.string(&r.name)?;
            w.f32s(&r.values);
        }
        Ok(w.buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let count = r.u32("record count", None)? as usize;
        let dim = r.u32("dimension", None)?;
        let mut seen = HashSet::new();
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let offset = r.offset();
            let name = r.string("record name", Some(i))?;
            if !seen.insert(name.clone()) {
                return Err(FormatError::DuplicateName { offset, name });
            }
            let values = r.f32s(dim as usize, "record values", Some(i))?;
            records.push(EmbeddingRecord { name, values });
        }
        r.finish()?;
        Ok(Self { dim, records })
    }

    /// Decodes and additionally requires the declared dimension to be `expected`.
    pub fn decode_expecting(bytes: &[u8], expected: usize) -> Result<Self, FormatError> {
        let f = Self::decode(bytes)?;
        if f.dim as usize != expected {
            return Err(FormatError::DimMismatch {
                offset: 12,
                expected,
                found: f.dim as usize,
            });
        }
        Ok(f)
    }

    pub fn read(path: &Path) -> crate::Result<Self> {
        Ok(Self::decode(&read_file(path)?)?)
    }

    pub fn write(&self, path: &Path) -> crate::Result<()> {
        write_atomic(path, &self.encode()?)
    }
}
