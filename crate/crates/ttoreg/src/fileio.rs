//! Shared header+payload file-pair plumbing.
//!
//! Every stored array in this crate — volumes, masks, displacement fields,
//! checkpoints — is a `<name>.json` header next to a raw little-endian
//! payload. The header's `data` field names the payload file (no directory
//! components), which is resolved relative to the header's parent directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Derive the payload path for a header path by swapping the extension.
pub(crate) fn payload_path_for(json_path: &Path) -> PathBuf {
    json_path.with_extension("raw")
}

/// Payload filename (for the header's `data` field).
pub(crate) fn payload_name_for(json_path: &Path) -> Result<String> {
    let raw = payload_path_for(json_path);
    raw.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| Error::Invalid(format!("path {} has no file name", json_path.display())))
}

/// Write a header + payload pair. The header is serialized as pretty JSON so
/// the files stay human-inspectable; serialization order is struct order, so
/// repeated saves are byte-identical.
pub(crate) fn write_pair<H: Serialize>(json_path: &Path, header: &H, payload: &[u8]) -> Result<()> {
    if let Some(parent) = json_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut text = serde_json::to_string_pretty(header)
        .map_err(|e| Error::format(json_path, format!("header serialization: {e}")))?;
    text.push('\n');
    fs::write(json_path, text).map_err(|e| Error::io(json_path, e))?;
    let raw = payload_path_for(json_path);
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))?;
    Ok(())
}

/// Read and parse a JSON header.
pub(crate) fn read_header<H: DeserializeOwned>(json_path: &Path) -> Result<H> {
    let text = fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(json_path, format!("bad header: {e}")))
}

/// Read the payload named by a header, enforcing the exact byte length the
/// header implies. A wrong length is a format error, not a truncation to fix.
pub(crate) fn read_payload(json_path: &Path, data_name: &str, expected_len: usize) -> Result<Vec<u8>> {
    if data_name.contains('/') || data_name.contains('\\') {
        return Err(Error::format(
            json_path,
            format!("payload name {data_name:?} must not contain directory components"),
        ));
    }
    let dir = json_path.parent().unwrap_or_else(|| Path::new(""));
    let raw_path = dir.join(data_name);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    if bytes.len() != expected_len {
        return Err(Error::format(
            json_path,
            format!("payload {} is {} bytes, header implies {}", data_name, bytes.len(), expected_len),
        ));
    }
    Ok(bytes)
}

pub(crate) fn f32s_to_le_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn le_bytes_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}
