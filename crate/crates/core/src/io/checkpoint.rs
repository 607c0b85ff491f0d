use std::collections::HashSet;
use std::path::Path;

use super::binary::{count_u32, Reader, Writer};
use super::{read_file, write_atomic, FormatError};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"SEVM";
pub const VERSION: u32 = 1;

/// Model parameters plus a free-form metadata string (the run configuration
/// as JSON).
///
/// Layout: magic `SEVM`, `u32` version, `u32`-prefixed metadata, `u32`
/// parameter count, then per parameter a `u16`-prefixed name, `u8` rank, rank
/// `u32` dims and the `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub params: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore<f32>, meta: String) -> Self {
        Self {
            meta,
            params: store
                .iter()
                .map(|(_, n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    /// Copies stored values into `store` by name. Every parameter of the store
    /// must be present with the same shape.
    pub fn load_into(&self, store: &mut ParamStore<f32>) -> crate::Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let (_, t) = self
                .params
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| {
                    crate::Error::state(format!("checkpoint lacks parameter {name:?}"))
                })?;
            if t.shape() != store.get(id).shape() {
                return Err(crate::Error::state(format!(
                    "parameter {name:?} has shape {:?} in the checkpoint but {:?} in the model",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>, FormatError> {
        let mut seen = HashSet::new();
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.long_string(&self.meta)?;
        w.u32(count_u32(self.params.len(), "parameter count")?);
        for (name, t) in &self.params {
            if !seen.insert(name.as_str()) {
                return Err(FormatError::Invalid(format!(
                    "duplicate parameter {name:?}"
                )));
            }
            w.string(name)?;
            w.u8(t.ndim() as u8);
            for d in t.shape() {
                w.u32(count_u32(*d, "dimension")?);
            }
            w.f32s(t.data());
        }
        Ok(w.buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let meta = r.long_string("metadata")?;
        let count = r.u32("parameter count", None)? as usize;
        let mut seen = HashSet::new();
        let mut params = Vec::with_capacity(count.min(1 << 12));
        for i in 0..count {
            let offset = r.offset();
            let name = r.string("parameter name", Some(i))?;
            if !seen.insert(name.clone()) {
                return Err(FormatError::DuplicateName { offset, name });
            }
            let rank_at = r.offset();
            let rank = r.u8("parameter rank", Some(i))? as usize;
            if rank > 4 {
                return Err(FormatError::DimMismatch {
                    offset: rank_at,
                    expected: 4,
                    found: rank,
                });
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("parameter shape", Some(i))? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, d| a.checked_mul(*d))
                .ok_or_else(|| FormatError::Invalid(format!("shape {shape:?} overflows")))?;
            let data = r.f32s(numel, "parameter values", Some(i))?;
            let t = Tensor::new(&shape, data).map_err(|e| FormatError::Invalid(e.to_string()))?;
            params.push((name, t));
        }
        r.finish()?;
        Ok(Self { meta, params })
    }

    pub fn read(path: &Path) -> crate::Result<Self> {
        Ok(Self::decode(&read_file(path)?)?)
    }

    pub fn write(&self, path: &Path) -> crate::Result<()> {
        write_atomic(path, &self.encode()?)
    }
}
