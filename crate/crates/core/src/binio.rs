//! Little-endian tagged-section reading and writing shared by the binary
//! containers.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic at offset {offset}: expected {expected:?}, found {found:?}")]
    BadMagic { offset: usize, expected: String, found: String },
    #[error("unsupported version {found} at offset {offset} (expected {expected})")]
    Version { offset: usize, found: u32, expected: u32 },
    #[error("truncated at offset {offset}: need {needed} bytes, {available} available")]
    Truncated { offset: usize, needed: u64, available: usize },
    #[error("section at offset {offset}: expected {expected}, found {found:?}")]
    Section { offset: usize, expected: String, found: String },
    #[error("section {section} at offset {offset}: length {got}, expected {expected}")]
    SectionLength { offset: usize, section: String, expected: u64, got: u64 },
    #[error("invalid field at offset {offset}: {message}")]
    Invalid { offset: usize, message: String },
    #[error("{0} trailing bytes after the last section")]
    Trailing(usize),
}

pub type Result<T> = std::result::Result<T, FormatError>;

/// Append `tag | u64 length | payload`.
pub fn write_section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

/// Write the container preamble `magic | u32 version`.
pub fn write_header(out: &mut Vec<u8>, magic: &[u8; 4], version: u32) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
}

/// Cursor over a byte buffer that reports absolute offsets in its errors.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: u64) -> Result<&'a [u8]> {
        let available = self.remaining();
        if n > available as u64 {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let n = n as usize;
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// Check `magic | u32 version` at the current position.
    pub fn header(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        let offset = self.pos;
        let found = self.take(4)?;
        if found != magic {
            return Err(FormatError::BadMagic {
                offset,
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        let offset = self.pos;
        let v = self.u32()?;
        if v != version {
            return Err(FormatError::Version {
                offset,
                found: v,
                expected: version,
            });
        }
        Ok(())
    }

    /// Read a section with the given tag, optionally checking its length.
    /// Returns the payload and its absolute offset.
    pub fn section(&mut self, tag: &[u8; 4], expected_len: Option<u64>) -> Result<(&'a [u8], usize)> {
        let len = self.section_header(tag, expected_len)?;
        let start = self.pos;
        Ok((self.take(len)?, start))
    }

    /// Read a section tag and length, leaving the payload unread.
    pub fn section_header(&mut self, tag: &[u8; 4], expected_len: Option<u64>) -> Result<u64> {
        let offset = self.pos;
        let found = self.take(4)?;
        if found != tag {
            return Err(FormatError::Section {
                offset,
                expected: String::from_utf8_lossy(tag).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        let len_offset = self.pos;
        let len = self.u64()?;
        if let Some(want) = expected_len {
            if len != want {
                return Err(FormatError::SectionLength {
                    offset: len_offset,
                    section: String::from_utf8_lossy(tag).into_owned(),
                    expected: want,
                    got: len,
                });
            }
        }
        Ok(len)
    }

    pub fn finish(&self) -> Result<()> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(FormatError::Trailing(n)),
        }
    }
}
