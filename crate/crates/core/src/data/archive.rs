//! Named-array archive: a length-prefixed JSON manifest followed by raw
//! little-endian array payloads.
//!
//! Layout:
//!
//! ```text
//! [u64 LE: header length N][N bytes UTF-8 JSON header][payload]
//! ```
//!
//! The header is `{"format_version": 1, "entries": [{"name", "dtype", "shape"}...],
//! "metadata": {...}}`. Payload arrays are row-major and concatenated in
//! manifest order; `f32` entries take 4 bytes per element, `f64` entries 8.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::hex;

pub const ARCHIVE_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::F64(_) => "f64",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            ArrayData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            ArrayData::F64(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub entries: Vec<NamedArray>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    entries: Vec<EntryHeader>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

fn element_size(dtype: &str) -> Option<usize> {
    match dtype {
        "f32" => Some(4),
        "f64" => Some(8),
        _ => None,
    }
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate archive entry `{}`",
                    e.name
                )));
            }
            let n: usize = e.shape.iter().product();
            if n != e.data.len() {
                return Err(Error::Validation(format!(
                    "entry `{}`: shape {:?} holds {n} elements but data has {}",
                    e.name,
                    e.shape,
                    e.data.len()
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = Header {
            format_version: ARCHIVE_FORMAT_VERSION,
            entries: self
                .entries
                .iter()
                .map(|e| EntryHeader {
                    name: e.name.clone(),
                    dtype: e.data.dtype().into(),
                    shape: e.shape.clone(),
                })
                .collect(),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Validation(e.to_string()))?;
        let mut out = Vec::with_capacity(8 + json.len());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for e in &self.entries {
            match &e.data {
                ArrayData::F32(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Validation(format!(
                "archive truncated at byte {}: missing 8-byte header length",
                bytes.len()
            )));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let header_end = 8usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| {
                Error::Validation(format!(
                "header length {header_len} declared at byte 0 runs past end of file ({} bytes)",
                bytes.len()
            ))
            })?;
        let header: Header = serde_json::from_slice(&bytes[8..header_end]).map_err(|e| {
            Error::Validation(format!(
                "malformed header JSON at line {} column {} (header spans bytes 8..{header_end}): {e}",
                e.line(),
                e.column()
            ))
        })?;
        if header.format_version != ARCHIVE_FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported archive format_version {}",
                header.format_version
            )));
        }

        let mut expected = 0usize;
        for e in &header.entries {
            let size = element_size(&e.dtype).ok_or_else(|| {
                Error::Validation(format!(
                    "entry `{}` has unknown dtype `{}`",
                    e.name, e.dtype
                ))
            })?;
            expected += size * e.shape.iter().product::<usize>();
        }
        let payload = &bytes[header_end..];
        if payload.len() != expected {
            return Err(Error::Validation(format!(
                "payload starting at byte {header_end} should hold {expected} bytes but holds {}",
                payload.len()
            )));
        }

        let mut entries = Vec::with_capacity(header.entries.len());
        let mut seen = HashSet::new();
        let mut off = 0;
        for e in header.entries {
            if !seen.insert(e.name.clone()) {
                return Err(Error::Validation(format!(
                    "duplicate archive entry `{}`",
                    e.name
                )));
            }
            let n: usize = e.shape.iter().product();
            let data = if e.dtype == "f32" {
                let v = payload[off..off + 4 * n]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                off += 4 * n;
                ArrayData::F32(v)
            } else {
                let v = payload[off..off + 8 * n]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                off += 8 * n;
                ArrayData::F64(v)
            };
            entries.push(NamedArray {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        Ok(Archive {
            entries,
            metadata: header.metadata,
        })
    }

    /// SHA-256 of the payload section only.
    pub fn payload_sha256(&self) -> Result<String> {
        let bytes = self.to_bytes()?;
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        Ok(hex(&Sha256::digest(&bytes[8 + header_len..])))
    }
}

pub fn write_archive(archive: &Archive, path: &Path) -> Result<()> {
    let bytes = archive.to_bytes()?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Archive::from_bytes(&bytes)
}
