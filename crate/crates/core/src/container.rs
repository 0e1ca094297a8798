//! Shared layout of the adapter and checkpoint files:
//!
//! ```text
//! magic      4 bytes
//! version    u32 little-endian
//! hdr_len    u32 little-endian
//! header     hdr_len bytes of JSON
//! payload    little-endian f64 values, in the order the header lists them
//! ```

use std::path::Path;

use crate::error::{Error, Result};

pub fn encode(magic: &[u8; 4], version: u32, header: &[u8], payloads: &[&[f64]]) -> Vec<u8> {
    let total: usize = payloads.iter().map(|p| p.len()).sum();
    let mut out = Vec::with_capacity(12 + header.len() + 8 * total);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    for p in payloads {
        for v in *p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parsed container: the raw JSON header and a cursor over the payload.
pub struct Decoded<'a> {
    pub header: &'a [u8],
    payload: &'a [u8],
    payload_offset: usize,
    pos: usize,
}

impl<'a> Decoded<'a> {
    pub fn parse(bytes: &'a [u8], magic: &[u8; 4], version: u32, kind: &'static str) -> Result<Self> {
        let corrupt = |offset: usize, reason: &str| Error::CorruptFile {
            offset: offset as u64,
            reason: reason.to_string(),
        };
        if bytes.len() < 12 {
            return Err(corrupt(bytes.len(), "truncated preamble"));
        }
        if &bytes[..4] != magic {
            return Err(corrupt(0, &format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
        }
        let found = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if found != version {
            return Err(Error::VersionMismatch {
                kind,
                found,
                expected: version,
            });
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let end = 12usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt(8, "header length exceeds file size"))?;
        Ok(Decoded {
            header: &bytes[12..end],
            payload: &bytes[end..],
            payload_offset: end,
            pos: 0,
        })
    }

    pub fn header_json<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_slice(self.header).map_err(|e| Error::CorruptFile {
            offset: 12 + e.column() as u64,
            reason: format!("bad header: {e}"),
        })
    }

    /// Next `n` payload values.
    pub fn take(&mut self, n: usize) -> Result<Vec<f64>> {
        let need = n * 8;
        if self.payload.len() - self.pos < need {
            return Err(Error::CorruptFile {
                offset: (self.payload_offset + self.payload.len()) as u64,
                reason: format!(
                    "payload truncated: need {} more bytes at offset {}",
                    need,
                    self.payload_offset + self.pos
                ),
            });
        }
        let out = self.payload[self.pos..self.pos + need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        self.pos += need;
        Ok(out)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.payload.len() {
            return Err(Error::CorruptFile {
                offset: (self.payload_offset + self.pos) as u64,
                reason: format!("{} trailing bytes", self.payload.len() - self.pos),
            });
        }
        Ok(())
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::file(path, e))
}
