//! Binary container shared by dataset and weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes
//! header_len u64
//! header     header_len bytes of UTF-8 JSON, carrying `schema_version`
//! payload    f64 values, little-endian
//! checksum   u64 CRC-64/ECMA-182 over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_ECMA_182};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);

pub fn checksum(bytes: &[u8]) -> u64 {
    CRC64.checksum(bytes)
}

pub fn encode<H: Serialize>(magic: &[u8; 8], header: &H, payload: &[f64]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)
        .map_err(|e| Error::Format(format!("cannot serialize header: {e}")))?;
    let mut out = Vec::with_capacity(8 + 8 + header.len() + payload.len() * 8 + 8);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

pub fn decode<H: DeserializeOwned>(
    bytes: &[u8],
    magic: &[u8; 8],
    schema_version: u32,
) -> Result<(H, Vec<f64>)> {
    if bytes.len() < 24 {
        return Err(Error::Format(format!("truncated file ({} bytes)", bytes.len())));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().expect("8-byte trailer"));
    let computed = checksum(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    if &body[..8] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&body[..8]),
            String::from_utf8_lossy(magic)
        )));
    }
    let header_len = u64::from_le_bytes(body[8..16].try_into().expect("8-byte length")) as usize;
    let rest = &body[16..];
    if header_len > rest.len() {
        return Err(Error::Format("header length exceeds file size".into()));
    }
    let (header, payload) = rest.split_at(header_len);
    if payload.len() % 8 != 0 {
        return Err(Error::Format("payload is not a whole number of f64 values".into()));
    }

    let raw: serde_json::Value = serde_json::from_slice(header)
        .map_err(|e| Error::Format(format!("unreadable header: {e}")))?;
    let found = raw
        .get("schema_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Format("header has no schema_version".into()))?;
    if found != u64::from(schema_version) {
        return Err(Error::Version {
            expected: schema_version,
            found: found as u32,
        });
    }
    let header: H =
        serde_json::from_value(raw).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((header, values))
}

pub fn write_file<H: Serialize>(path: &Path, magic: &[u8; 8], header: &H, payload: &[f64]) -> Result<()> {
    let bytes = encode(magic, header, payload)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file<H: DeserializeOwned>(
    path: &Path,
    magic: &[u8; 8],
    schema_version: u32,
) -> Result<(H, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, magic, schema_version)
}
