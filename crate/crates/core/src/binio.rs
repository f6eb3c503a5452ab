//! Little-endian helpers shared by the binary file formats.
//!
//! Every format starts with a 4-byte magic and a `u32` version.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, FormatError, Result};

pub const VERSION: u32 = 1;

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4]) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        Writer { buf }
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64s(&mut self, vs: &[f64]) -> &mut Self {
        self.buf.reserve(vs.len() * 8);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    pub fn f32s(&mut self, vs: &[f32]) -> &mut Self {
        self.buf.reserve(vs.len() * 4);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    pub fn bytes(&mut self, vs: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(vs);
        self
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn save(self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.buf)?;
        Ok(())
    }
}

pub(crate) struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    /// Checks magic and version, leaving the cursor at the first header field.
    pub fn open(data: &'a [u8], magic: &[u8; 4], path: &str) -> Result<Self> {
        let mut r = Reader {
            data,
            pos: 0,
            path: path.to_string(),
        };
        let found: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if &found != magic {
            return Err(r.err(FormatError::BadMagic {
                expected: *magic,
                found,
            }));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(FormatError::Version {
                expected: VERSION,
                found: version,
            }));
        }
        Ok(r)
    }

    pub fn err(&self, e: FormatError) -> Error {
        Error::format(self.path.clone(), e)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        match end {
            Some(end) => {
                let s = &self.data[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(FormatError::Truncated {
                expected: self.pos.saturating_add(n),
                found: self.data.len(),
            })),
        }
    }

    /// Fails with a truncation error unless `n` more bytes are available.
    pub fn require(&self, n: usize) -> Result<()> {
        let need = self.pos.saturating_add(n);
        if need > self.data.len() {
            return Err(self.err(FormatError::Truncated {
                expected: need,
                found: self.data.len(),
            }));
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| {
            self.err(FormatError::InvalidHeader("payload size overflows".into()))
        })?)?;
        let out: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if let Some(index) = out.iter().position(|v| !v.is_finite()) {
            return Err(self.err(FormatError::NonFinite { index }));
        }
        Ok(out)
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| {
            self.err(FormatError::InvalidHeader("payload size overflows".into()))
        })?)?;
        let out: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if let Some(index) = out.iter().position(|v| !v.is_finite()) {
            return Err(self.err(FormatError::NonFinite { index }));
        }
        Ok(out)
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.err(FormatError::TrailingBytes));
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io_at(path, e))
}
