//! Binary named-tensor container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | field                                      |
//! |--------------|--------------------------------------------|
//! | 4            | magic `FLWC`                               |
//! | 4            | format version (`u32`)                     |
//! | 8            | header length `H` (`u64`)                  |
//! | 32           | SHA-256 of header bytes followed by payload |
//! | `H`          | JSON header                                |
//! | rest         | payload: row-major `f64` values            |
//!
//! The header lists every entry as `{name, shape, dtype, offset}` with the
//! byte offset relative to the payload start, plus an optional base-model
//! hash and free-form metadata.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"FLWC";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 4 + 4 + 8 + 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryHeader {
    name: String,
    shape: [usize; 2],
    dtype: String,
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    entries: Vec<EntryHeader>,
    base_hash: Option<String>,
    meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightContainer {
    pub entries: BTreeMap<String, Tensor>,
    /// Content hash of the base model an adaptor file was trained against.
    pub base_hash: Option<String>,
    pub meta: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl WeightContainer {
    pub fn new(entries: BTreeMap<String, Tensor>, meta: serde_json::Value) -> Self {
        Self {
            entries,
            base_hash: None,
            meta,
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn kind(&self) -> Option<&str> {
        self.meta.get("kind").and_then(|k| k.as_str())
    }

    fn header_and_payload(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let mut entries = Vec::with_capacity(self.entries.len());
        let mut payload = Vec::new();
        for (name, t) in &self.entries {
            entries.push(EntryHeader {
                name: name.clone(),
                shape: [t.rows(), t.cols()],
                dtype: "f64".into(),
                offset: payload.len() as u64,
            });
            payload.extend_from_slice(&t.to_le_bytes());
        }
        let header = Header {
            entries,
            base_hash: self.base_hash.clone(),
            meta: self.meta.clone(),
        };
        Ok((serde_json::to_vec(&header)?, payload))
    }

    /// Hex SHA-256 over header and payload, as stored in the file.
    pub fn content_hash(&self) -> Result<String> {
        let (header, payload) = self.header_and_payload()?;
        let mut h = Sha256::new();
        h.update(&header);
        h.update(&payload);
        Ok(hex::encode(h.finalize()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (header, payload) = self.header_and_payload()?;
        let mut h = Sha256::new();
        h.update(&header);
        h.update(&payload);
        let digest = h.finalize();
        let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&digest);
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |msg: String| Error::Format(msg);
        if bytes.len() < PREFIX_LEN {
            return Err(fmt(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(fmt("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(fmt(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let stored = hex::encode(&bytes[16..48]);
        let body = &bytes[PREFIX_LEN..];
        if header_len > body.len() as u64 {
            return Err(fmt(format!("header length {header_len} exceeds file size")));
        }
        let found = sha256_hex(body);
        if found != stored {
            return Err(Error::HashMismatch {
                expected: stored,
                found,
            });
        }
        let (header, payload) = body.split_at(header_len as usize);
        let header: Header = serde_json::from_slice(header)?;

        let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.entries.len());
        let mut entries = BTreeMap::new();
        for e in &header.entries {
            if e.dtype != "f64" {
                return Err(fmt(format!("entry `{}` has unsupported dtype {}", e.name, e.dtype)));
            }
            let [rows, cols] = e.shape;
            let len = (rows as u64)
                .checked_mul(cols as u64)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| fmt(format!("entry `{}` is too large", e.name)))?;
            let end = e
                .offset
                .checked_add(len)
                .filter(|&end| end <= payload.len() as u64)
                .ok_or_else(|| fmt(format!("entry `{}` extends past the payload", e.name)))?;
            spans.push((e.offset, end, &e.name));
            let data = payload[e.offset as usize..end as usize]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            if entries.insert(e.name.clone(), Tensor::from_vec(rows, cols, data)?).is_some() {
                return Err(fmt(format!("duplicate entry `{}`", e.name)));
            }
        }
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(fmt(format!("entries `{}` and `{}` overlap", w[0].2, w[1].2)));
            }
        }
        Ok(Self {
            entries,
            base_hash: header.base_hash,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, &bytes)?;
        Ok(sha256_hex(&bytes[PREFIX_LEN..]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        Self::from_bytes(&bytes)
    }

    /// Rejects a container whose recorded base hash differs from `base`,
    /// unless `allow_mismatch` is set.
    pub fn check_base(&self, base: &str, allow_mismatch: bool) -> Result<()> {
        match &self.base_hash {
            Some(h) if h != base && !allow_mismatch => Err(Error::HashMismatch {
                expected: h.clone(),
                found: base.to_string(),
            }),
            None if !allow_mismatch => Err(Error::Format("container records no base-model hash".into())),
            _ => Ok(()),
        }
    }
}
