//! Binary file formats and atomic file handling.

pub mod checkpoint;
pub mod dataset;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use dataset::{read_dataset, read_dataset_header, write_dataset, DatasetHeader};

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, FormatErrorKind, Result};

/// Write-temp-then-rename so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or("bin"),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Reader { path, bytes, pos: 0 }
    }

    pub(crate) fn truncated(&self, expected: u64) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            kind: FormatErrorKind::Truncated { expected, got: self.bytes.len() as u64 },
        }
    }

    pub(crate) fn corrupt(&self, msg: impl Into<String>) -> Error {
        Error::Format { path: self.path.to_path_buf(), kind: FormatErrorKind::Corrupt(msg.into()) }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.truncated((self.pos + n) as u64));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != expected {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                kind: FormatErrorKind::BadMagic {
                    expected: *expected,
                    got: [got[0], got[1], got[2], got[3]],
                },
            });
        }
        Ok(())
    }

    pub(crate) fn version(&mut self, expected: u32) -> Result<()> {
        let got = self.u32()?;
        if got != expected {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                kind: FormatErrorKind::UnsupportedVersion { expected, got },
            });
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn u16_vec(&mut self, count: usize) -> Result<Vec<u16>> {
        let b = self.take(count * 2)?;
        Ok(b.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
    }

    pub(crate) fn f32_vec(&mut self, count: usize) -> Result<Vec<f32>> {
        let b = self.take(count * 4)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub(crate) fn push_u16s(out: &mut Vec<u8>, values: &[u16]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}
