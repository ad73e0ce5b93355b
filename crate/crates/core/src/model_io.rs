//! Self-describing model container shared by all fitted models.
//!
//! ```text
//! "GMDL" | version u32 | header_len u32 | header (UTF-8 JSON)
//! payload_len u64 | payload_len × f64
//! ```
//!
//! Every floating-point parameter lives in the `f64` payload so that a round
//! trip is bit-exact; the JSON header carries shapes, configuration and seeds.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"GMDL";
pub const VERSION: u32 = 1;

pub fn encode<H: Serialize>(header: &H, payload: &[f64]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(4 + 4 + 4 + header.len() + 8 + payload.len() * 8);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, Vec<f64>)> {
    let take = |from: usize, n: usize| -> Result<&[u8]> {
        bytes
            .get(from..from + n)
            .ok_or_else(|| Error::Truncated(format!("model file ends before byte {}", from + n)))
    };
    let found: [u8; 4] = take(0, 4)?.try_into().unwrap();
    if found != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found,
        });
    }
    let version = u32::from_le_bytes(take(4, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let header_len = u32::from_le_bytes(take(8, 4)?.try_into().unwrap()) as usize;
    let header: H = serde_json::from_slice(take(12, header_len)?)?;
    let mut off = 12 + header_len;
    let count = u64::from_le_bytes(take(off, 8)?.try_into().unwrap()) as usize;
    off += 8;
    let body = take(
        off,
        count
            .checked_mul(8)
            .ok_or_else(|| Error::Malformed("payload too large".into()))?,
    )?;
    if bytes.len() != off + body.len() {
        return Err(Error::Malformed("trailing bytes after payload".into()));
    }
    let payload = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, payload))
}

pub fn write<H: Serialize>(path: &Path, header: &H, payload: &[f64]) -> Result<()> {
    let bytes = encode(header, payload)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Sequential reader over a decoded payload.
pub(crate) struct PayloadReader<'a> {
    data: &'a [f64],
    pos: usize,
}

impl<'a> PayloadReader<'a> {
    pub(crate) fn new(data: &'a [f64]) -> Self {
        Self { data, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [f64]> {
        let out = self.data.get(self.pos..self.pos + n).ok_or_else(|| {
            Error::Truncated(format!("payload shorter than {} values", self.pos + n))
        })?;
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Malformed(format!(
                "{} unused payload values",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}
