//! Raw little-endian blobs with an 8-byte magic and a 4-byte version.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"S3DBLOB\0";
pub const VERSION: u32 = 1;
const HEADER: usize = 12;

fn write_raw(path: &Path, payload: &[u8]) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER + payload.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(payload);
    fs::write(path, buf)?;
    Ok(())
}

/// Reads a blob and checks header and payload size (`elem` bytes per value).
fn read_raw(path: &Path, count: usize, elem: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER + count * elem,
            found: bytes.len(),
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::MagicMismatch {
            path: path.to_path_buf(),
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("unsupported blob version {version}"),
        });
    }
    let payload = &bytes[HEADER..];
    let expected = count * elem;
    if payload.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER + expected,
            found: bytes.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::DimensionMismatch(format!(
            "{}: {} payload bytes, manifest implies {expected}",
            path.display(),
            payload.len()
        )));
    }
    Ok(payload.to_vec())
}

pub fn write_f32(path: &Path, values: &[f32]) -> Result<()> {
    let payload: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_raw(path, &payload)
}

pub fn write_f64(path: &Path, values: &[f64]) -> Result<()> {
    let payload: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_raw(path, &payload)
}

pub fn write_i32(path: &Path, values: &[i32]) -> Result<()> {
    let payload: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_raw(path, &payload)
}

pub fn read_f32(path: &Path, count: usize) -> Result<Vec<f32>> {
    let raw = read_raw(path, count, 4)?;
    Ok(raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn read_f64(path: &Path, count: usize) -> Result<Vec<f64>> {
    let raw = read_raw(path, count, 8)?;
    Ok(raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn read_i32(path: &Path, count: usize) -> Result<Vec<i32>> {
    let raw = read_raw(path, count, 4)?;
    Ok(raw
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Reads and parses a JSON manifest, mapping parse failures to
/// [`Error::MalformedHeader`].
pub fn read_manifest<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn write_manifest<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}
