//! Named-tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! [u64: header length N]
//! [N bytes: UTF-8 JSON header]
//! [packed tensor buffers]
//! ```
//!
//! The header maps each tensor name to
//! `{"dtype": "F32" | "F16", "shape": [..], "data_offsets": [begin, end]}`
//! with offsets relative to the first byte after the header. An optional
//! `"__metadata__"` entry maps strings to strings.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Tensor;

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Serialize, Deserialize)]
struct EntryHeader {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// Immutable name → tensor map plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    entries: BTreeMap<String, Tensor<f32>>,
    metadata: BTreeMap<String, String>,
}

impl WeightStore {
    pub fn new(entries: BTreeMap<String, Tensor<f32>>, metadata: BTreeMap<String, String>) -> Self {
        Self { entries, metadata }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entries(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.entries
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn into_parts(self) -> (BTreeMap<String, Tensor<f32>>, BTreeMap<String, String>) {
        (self.entries, self.metadata)
    }

    pub fn parameter_count(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Rejects any entry holding NaN or infinity.
    pub fn validate_finite(&self) -> Result<()> {
        match self.entries.iter().find(|(_, t)| !t.all_finite()) {
            Some((name, _)) => Err(Error::NonFinite(name.clone())),
            None => Ok(()),
        }
    }

    /// Serializes to the container layout, entries in name order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = serde_json::Map::new();
        if !self.metadata.is_empty() {
            header.insert(
                METADATA_KEY.to_string(),
                serde_json::to_value(&self.metadata).expect("string map serializes"),
            );
        }
        let mut offset = 0;
        for (name, t) in &self.entries {
            let len = t.numel() * 4;
            let entry = EntryHeader {
                dtype: "F32".into(),
                shape: t.shape().to_vec(),
                data_offsets: [offset, offset + len],
            };
            header.insert(
                name.clone(),
                serde_json::to_value(entry).expect("header serializes"),
            );
            offset += len;
        }
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.entries.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

fn json_error_offset(header: &str, err: &serde_json::Error) -> usize {
    let line_start: usize = header
        .split_inclusive('\n')
        .take(err.line().saturating_sub(1))
        .map(str::len)
        .sum();
    8 + line_start + err.column().saturating_sub(1)
}

/// Parses a container held in memory.
pub fn parse_container(bytes: &[u8]) -> Result<WeightStore> {
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            expected: 8,
            actual: bytes.len(),
        });
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let header_end = 8usize
        .checked_add(usize::try_from(header_len).unwrap_or(usize::MAX))
        .filter(|&end| end <= bytes.len())
        .ok_or(Error::Container {
            offset: 0,
            message: format!(
                "header length {header_len} exceeds file size {}",
                bytes.len()
            ),
        })?;
    let header = std::str::from_utf8(&bytes[8..header_end]).map_err(|e| Error::Container {
        offset: 8 + e.valid_up_to(),
        message: "header is not valid UTF-8".into(),
    })?;
    let raw: BTreeMap<String, serde_json::Value> =
        serde_json::from_str(header).map_err(|e| Error::Container {
            offset: json_error_offset(header, &e),
            message: e.to_string(),
        })?;
    let buffer = &bytes[header_end..];

    let mut entries = BTreeMap::new();
    let mut metadata = BTreeMap::new();
    for (name, value) in raw {
        if name == METADATA_KEY {
            metadata = serde_json::from_value(value).map_err(|e| Error::Container {
                offset: 8,
                message: format!("metadata: {e}"),
            })?;
            continue;
        }
        let entry: EntryHeader = serde_json::from_value(value).map_err(|e| Error::Container {
            offset: 8,
            message: format!("entry `{name}`: {e}"),
        })?;
        let width = match entry.dtype.as_str() {
            "F32" => 4,
            "F16" => 2,
            other => {
                return Err(Error::UnsupportedDtype {
                    name,
                    dtype: other.to_string(),
                })
            }
        };
        let [begin, end] = entry.data_offsets;
        let numel: usize = entry.shape.iter().product();
        if end < begin || end - begin != numel * width {
            return Err(Error::Container {
                offset: header_end + begin,
                message: format!(
                    "entry `{name}` spans {} bytes, shape {:?} as {} needs {}",
                    end.saturating_sub(begin),
                    entry.shape,
                    entry.dtype,
                    numel * width
                ),
            });
        }
        if end > buffer.len() {
            return Err(Error::Truncated {
                expected: header_end + end,
                actual: bytes.len(),
            });
        }
        let raw = &buffer[begin..end];
        let data: Vec<f32> = if width == 4 {
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        } else {
            raw.chunks_exact(2)
                .map(|c| half::f16::from_le_bytes(c.try_into().unwrap()).to_f32())
                .collect()
        };
        entries.insert(name, Tensor::new(entry.shape, data)?);
    }
    let store = WeightStore { entries, metadata };
    store.validate_finite()?;
    Ok(store)
}

pub fn load_container(path: impl AsRef<Path>) -> Result<WeightStore> {
    parse_container(&std::fs::read(path)?)
}
