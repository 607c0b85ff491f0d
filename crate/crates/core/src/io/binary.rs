//! Little-endian cursor and writer shared by the binary formats.

use super::FormatError;

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn take(
        &mut self,
        n: usize,
        what: &'static str,
        record: Option<usize>,
    ) -> Result<&'a [u8], FormatError> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                what,
                record,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<(), FormatError> {
        let found = self.take(4, "magic", None)?;
        if found != expected {
            return Err(FormatError::BadMagic {
                offset: 0,
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    pub fn version(&mut self, supported: u32) -> Result<u32, FormatError> {
        let offset = self.pos;
        let v = self.u32("version", None)?;
        if v != supported {
            return Err(FormatError::UnsupportedVersion { offset, version: v });
        }
        Ok(v)
    }

    pub fn u8(&mut self, what: &'static str, record: Option<usize>) -> Result<u8, FormatError> {
        Ok(self.take(1, what, record)?[0])
    }

    pub fn u16(&mut self, what: &'static str, record: Option<usize>) -> Result<u16, FormatError> {
        let b = self.take(2, what, record)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self, what: &'static str, record: Option<usize>) -> Result<u32, FormatError> {
        let b = self.take(4, what, record)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f32s(
        &mut self,
        n: usize,
        what: &'static str,
        record: Option<usize>,
    ) -> Result<Vec<f32>, FormatError> {
        let bytes = n.checked_mul(4).ok_or_else(|| {
            FormatError::Invalid(format!("{n} floats overflow the address space"))
        })?;
        let b = self.take(bytes, what, record)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    /// `u16` length-prefixed UTF-8 string.
    pub fn string(
        &mut self,
        what: &'static str,
        record: Option<usize>,
    ) -> Result<String, FormatError> {
        let len = self.u16(what, record)? as usize;
        let offset = self.pos;
        let b = self.take(len, what, record)?;
        String::from_utf8(b.to_vec()).map_err(|_| FormatError::InvalidUtf8 { offset })
    }

    /// `u32` length-prefixed UTF-8 text.
    pub fn long_string(&mut self, what: &'static str) -> Result<String, FormatError> {
        let len = self.u32(what, None)? as usize;
        let offset = self.pos;
        let b = self.take(len, what, None)?;
        String::from_utf8(b.to_vec()).map_err(|_| FormatError::InvalidUtf8 { offset })
    }

    pub fn finish(&self) -> Result<(), FormatError> {
        if self.pos != self.buf.len() {
            return Err(FormatError::TrailingBytes {
                offset: self.pos,
                count: self.buf.len() - self.pos,
            });
        }
        Ok(())
    }
}

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn string(&mut self, s: &str) -> Result<(), FormatError> {
        let len = u16::try_from(s.len()).map_err(|_| {
            FormatError::Invalid(format!(
                "name of {} bytes exceeds the u16 length field",
                s.len()
            ))
        })?;
        self.u16(len);
        self.bytes(s.as_bytes());
        Ok(())
    }

    pub fn long_string(&mut self, s: &str) -> Result<(), FormatError> {
        self.u32(count_u32(s.len(), "text length")?);
        self.bytes(s.as_bytes());
        Ok(())
    }
}

pub(crate) fn count_u32(n: usize, what: &str) -> Result<u32, FormatError> {
    u32::try_from(n).map_err(|_| FormatError::Invalid(format!("{what} {n} exceeds u32")))
}
