//! Configuration, binary file formats and report files.
//!
//! All binary formats are little-endian with a four-byte magic and a `u32`
//! version:
//!
//! | magic  | content                                   |
//! |--------|-------------------------------------------|
//! | `SEVB` | named embeddings ([`EmbeddingFile`])      |
//! | `SEVP` | style parameter banks ([`StyleBankFile`]) |
//! | `SEVM` | model checkpoints ([`Checkpoint`])        |

mod binary;
mod checkpoint;
pub mod config;
mod embedding_file;
pub mod report;
mod style_bank_file;

use std::path::Path;

pub use checkpoint::Checkpoint;
pub use config::{parse_config, parse_config_in, parse_config_str, Flags, RunConfig, Variant};
pub use embedding_file::{EmbeddingFile, EmbeddingRecord};
pub use style_bank_file::{StyleBankFile, StyleBankRecord};

/// Errors from reading or writing the binary formats. Reader errors carry the
/// byte offset at which the problem was detected.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic at offset {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        offset: usize,
        expected: String,
        found: String,
    },
    #[error("unsupported version {version} at offset {offset}")]
    UnsupportedVersion { offset: usize, version: u32 },
    #[error("truncated at offset {offset} while reading {what}{}", record.map(|r| format!(" of record {r}")).unwrap_or_default())]
    Truncated {
        offset: usize,
        what: &'static str,
        record: Option<usize>,
    },
    #[error("duplicate name {name:?} at offset {offset}")]
    DuplicateName { offset: usize, name: String },
    #[error("invalid UTF-8 name at offset {offset}")]
    InvalidUtf8 { offset: usize },
    #[error("dimension mismatch at offset {offset}: expected {expected}, found {found}")]
    DimMismatch {
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error(
        "non-positive scale {value} for channel {channel} of entry {entry} at offset {offset}"
    )]
    NonPositiveSigma {
        offset: usize,
        entry: usize,
        channel: usize,
        value: f32,
    },
    #[error("{count} trailing bytes after the last record at offset {offset}")]
    TrailingBytes { offset: usize, count: usize },
    #[error("invalid structure: {0}")]
    Invalid(String),
}

/// Writes `bytes` to `path` through a temporary file in the same directory and
/// an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> crate::Result<()> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let ctx = || format!("writing {}", path.display());
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| crate::Error::io(ctx(), e))?;
    tmp.write_all(bytes)
        .map_err(|e| crate::Error::io(ctx(), e))?;
    tmp.as_file()
        .sync_all()
        .map_err(|e| crate::Error::io(ctx(), e))?;
    tmp.persist(path)
        .map_err(|e| crate::Error::io(ctx(), e.error))?;
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> crate::Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| crate::Error::io(format!("reading {}", path.display()), e))
}
