//! Binary checkpoint container shared by every trained artifact.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "RGCKPT\0\x01"
//! header_len   u64       length of the JSON header in bytes
//! header_crc   u32       CRC32 of the JSON header bytes
//! header       JSON      {format_version, kind, meta, tensors: [{name, shape, offset, bytes, crc32}]}
//! blobs        f32 LE    row-major tensor data; offsets are relative to the blob region
//! ```
//!
//! Serialization is canonical: loading and re-saving gives identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RGCKPT\x00\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: u64,
    pub bytes: u64,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// In-memory form of a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn f32_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * 4);
    for &x in t.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Container {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.push((name.into(), t.clone()));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blobs = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let b = f32_bytes(t);
            entries.push(TensorEntry {
                name: name.clone(),
                shape: [t.rows(), t.cols()],
                offset: blobs.len() as u64,
                bytes: b.len() as u64,
                crc32: crc32fast::hash(&b),
            });
            blobs.extend_from_slice(&b);
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let hjson = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + hjson.len() + blobs.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&hjson).to_le_bytes());
        out.extend_from_slice(&hjson);
        out.extend_from_slice(&blobs);
        out
    }

    /// Parses and fully validates a container. `path` is only used in errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(Error::format(path, "file truncated before header"));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::format(path, "bad magic; not a checkpoint container"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let hcrc = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
        let hend = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format(path, "header length exceeds file size"))?;
        let hbytes = &bytes[20..hend];
        let found = crc32fast::hash(hbytes);
        if found != hcrc {
            return Err(Error::Checksum {
                path: path.to_path_buf(),
                expected: hcrc,
                found,
            });
        }
        let header: Header =
            serde_json::from_slice(hbytes).map_err(|e| Error::format(path, format!("invalid header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::format(
                path,
                format!(
                    "unsupported format version {} (expected {FORMAT_VERSION})",
                    header.format_version
                ),
            ));
        }
        let blobs = &bytes[hend..];
        let mut expected_offset = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let [r, c] = e.shape;
            if e.offset != expected_offset || e.bytes != (r * c * 4) as u64 {
                return Err(Error::format(
                    path,
                    format!("tensor {} has inconsistent layout", e.name),
                ));
            }
            let end = (e.offset + e.bytes) as usize;
            if end > blobs.len() {
                return Err(Error::format(path, format!("tensor {} truncated", e.name)));
            }
            let raw = &blobs[e.offset as usize..end];
            let found = crc32fast::hash(raw);
            if found != e.crc32 {
                return Err(Error::Checksum {
                    path: path.join(&e.name),
                    expected: e.crc32,
                    found,
                });
            }
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            tensors.push((e.name.clone(), Tensor::from_vec(r, c, data)));
            expected_offset = end as u64;
        }
        if expected_offset as usize != blobs.len() {
            return Err(Error::format(path, "trailing bytes after last tensor"));
        }
        Ok(Container {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    /// Writes the container and returns the SHA-256 of the written bytes.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    /// Reads a container and returns it with the SHA-256 of the file.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let c = Container::from_bytes(&bytes, path)?;
        Ok((c, sha256_hex(&bytes)))
    }

    /// Content hash of the canonical serialization.
    pub fn hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    pub fn expect_kind(&self, kind: &str, path: &Path) -> Result<()> {
        if self.kind != kind {
            return Err(Error::format(
                path,
                format!("expected a {kind} checkpoint, found {}", self.kind),
            ));
        }
        Ok(())
    }
}
