use std::path::Path;

use super::binary::{count_u32, Reader, Writer};
use super::{read_file, write_atomic, FormatError};

pub const MAGIC: &[u8; 4] = b"SEVP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct StyleBankRecord {
    pub provenance: String,
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
}

/// A serialized style bank.
///
/// Layout: magic `SEVP`, `u32` version, `u32` channels, `u32` entry count, then
/// per entry a `u16`-prefixed UTF-8 provenance string, `channels` means and
/// `channels` scales (all `f32`). Every scale must be positive.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleBankFile {
    pub channels: u32,
    pub entries: Vec<StyleBankRecord>,
}

impl StyleBankFile {
    fn validate(&self) -> Result<(), FormatError> {
        for (i, e) in self.entries.iter().enumerate() {
            if e.mu.len() != self.channels as usize || e.sigma.len() != self.channels as usize {
                return Err(FormatError::Invalid(format!(
                    "entry {i} has {}/{} values for {} channels",
                    e.mu.len(),
                    e.sigma.len(),
                    self.channels
                )));
            }
            if let Some(c) = e.sigma.iter().position(|s| !(*s > 0.0)) {
                return Err(FormatError::Invalid(format!(
                    "entry {i} has non-positive scale {} in channel {c}",
                    e.sigma[c]
                )));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>, FormatError> {
        self.validate()?;
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(self.channels);
        w.u32(count_u32(self.entries.len(), "entry count")?);
        for e in &self.entries {
            w.string(&e.provenance)?;
            w.f32s(&e.mu);
            w.f32s(&e.sigma);
        }
        Ok(w.buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let channels = r.u32("channel count", None)?;
        let count = r.u32("entry count", None)? as usize;
        let c = channels as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let provenance = r.string("entry provenance", Some(i))?;
            let mu = r.f32s(c, "entry means", Some(i))?;
            let sigma_at = r.offset();
            let sigma = r.f32s(c, "entry scales", Some(i))?;
            if let Some(ch) = sigma.iter().position(|s| !(*s > 0.0)) {
                return Err(FormatError::NonPositiveSigma {
                    offset: sigma_at + 4 * ch,
                    entry: i,
                    channel: ch,
                    value: sigma[ch],
                });
            }
            entries.push(StyleBankRecord {
                provenance,
                mu,
                sigma,
            });
        }
        r.finish()?;
        Ok(Self { channels, entries })
    }

    /// Decodes and additionally requires `expected` channels.
    pub fn decode_expecting(bytes: &[u8], expected: usize) -> Result<Self, FormatError> {
        let f = Self::decode(bytes)?;
        if f.channels as usize != expected {
            return Err(FormatError::DimMismatch {
                offset: 8,
                expected,
                found: f.channels as usize,
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
