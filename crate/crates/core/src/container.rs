//! Binary container shared by dataset, checkpoint and confidence files:
//! 4 magic bytes, `u32` version, `u32` header length, a JSON header, then
//! a raw little-endian body whose size the header determines.

use std::fs::{self, File};
use std::io::{self, BufReader, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("file truncated or oversized: expected {expected} bytes of {section}, found {actual}")]
    Truncated {
        section: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("malformed header: {0}")]
    Header(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn read_section<R: Read>(r: &mut R, len: usize, section: &'static str) -> Result<Vec<u8>, ContainerError> {
    let mut buf = Vec::with_capacity(len);
    r.by_ref().take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(ContainerError::Truncated {
            section,
            expected: len,
            actual: buf.len(),
        });
    }
    Ok(buf)
}

fn read_prelude<R: Read, H: DeserializeOwned>(
    r: &mut R,
    magic: [u8; 4],
    version: u32,
) -> Result<H, ContainerError> {
    let head = read_section(r, 12, "preamble")?;
    let found: [u8; 4] = head[..4].try_into().expect("4 bytes");
    if found != magic {
        return Err(ContainerError::BadMagic {
            found,
            expected: magic,
        });
    }
    let v = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
    if v != version {
        return Err(ContainerError::Version(v));
    }
    let len = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize;
    let json = read_section(r, len, "header")?;
    serde_json::from_slice(&json).map_err(|e| ContainerError::Header(e.to_string()))
}

/// Reads the JSON header without touching the body.
pub fn read_header<H: DeserializeOwned>(path: &Path, magic: [u8; 4], version: u32) -> Result<H, ContainerError> {
    let mut r = BufReader::new(File::open(path)?);
    read_prelude(&mut r, magic, version)
}

/// Reads the header, then exactly `body_len(&header)` bytes. Trailing bytes
/// are an error.
pub fn read<H, F>(path: &Path, magic: [u8; 4], version: u32, body_len: F) -> Result<(H, Vec<u8>), ContainerError>
where
    H: DeserializeOwned,
    F: FnOnce(&H) -> Result<usize, ContainerError>,
{
    let mut r = BufReader::new(File::open(path)?);
    let header: H = read_prelude(&mut r, magic, version)?;
    let len = body_len(&header)?;
    let body = read_section(&mut r, len, "body")?;
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(ContainerError::Truncated {
            section: "body",
            expected: len,
            actual: len + 1,
        });
    }
    Ok((header, body))
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write<H: Serialize>(path: &Path, magic: [u8; 4], version: u32, header: &H, body: &[u8]) -> Result<(), ContainerError> {
    let json = serde_json::to_vec(header).map_err(|e| ContainerError::Header(e.to_string()))?;
    let tmp = path.with_extension("partial");
    {
        let mut f = io::BufWriter::new(File::create(&tmp)?);
        f.write_all(&magic)?;
        f.write_all(&version.to_le_bytes())?;
        f.write_all(&(json.len() as u32).to_le_bytes())?;
        f.write_all(&json)?;
        f.write_all(body)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn take_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect()
}
