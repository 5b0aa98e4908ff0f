//! JSON metadata plus a binary `f64` sidecar.
//!
//! The binary part is `magic (4) | version u32 | d u32 | C u32` followed by
//! little-endian `f64` blocks whose layout the caller defines. The JSON file
//! names the sidecar by file name, relative to its own directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::dataio::DataError;

const VERSION: u32 = 1;

pub(crate) fn sidecar_path(json_path: &Path) -> PathBuf {
    json_path.with_extension("bin")
}

pub(crate) fn sidecar_name(json_path: &Path) -> String {
    sidecar_path(json_path)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub(crate) fn write<M: Serialize>(
    json_path: &Path,
    meta: &M,
    magic: &[u8; 4],
    dim: usize,
    classes: usize,
    values: &[f64],
) -> Result<(), DataError> {
    let mut buf = Vec::with_capacity(16 + values.len() * 8);
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.extend_from_slice(&(classes as u32).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(sidecar_path(json_path), buf)?;
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| DataError::Format(format!("metadata serialization: {e}")))?;
    fs::write(json_path, json)?;
    Ok(())
}

/// Reads the metadata and the sidecar it names; checks the binary header
/// against `dim`/`classes` taken from the metadata and the value count.
pub(crate) fn read<M: DeserializeOwned>(
    json_path: &Path,
    magic: &[u8; 4],
    binary_name: impl Fn(&M) -> &str,
    shape: impl Fn(&M) -> (usize, usize, usize),
) -> Result<(M, Vec<f64>), DataError> {
    let text = fs::read_to_string(json_path)?;
    let meta: M =
        serde_json::from_str(&text).map_err(|e| DataError::Format(format!("metadata: {e}")))?;
    let dir = json_path.parent().unwrap_or_else(|| Path::new("."));
    let bytes = fs::read(dir.join(binary_name(&meta)))?;
    if bytes.len() < 16 || &bytes[..4] != magic {
        return Err(DataError::Format("bad sidecar magic".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    if word(4) != VERSION as usize {
        return Err(DataError::Format(format!(
            "unsupported sidecar version {}",
            word(4)
        )));
    }
    let (dim, classes, count) = shape(&meta);
    if word(8) != dim || word(12) != classes {
        return Err(DataError::Integrity(
            "sidecar header disagrees with metadata".into(),
        ));
    }
    let expected = 16 + count * 8;
    if bytes.len() < expected {
        return Err(DataError::Truncation {
            expected: expected as u64,
            actual: bytes.len() as u64,
        });
    }
    if bytes.len() > expected {
        return Err(DataError::Format("trailing bytes in sidecar".into()));
    }
    let values = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((meta, values))
}
