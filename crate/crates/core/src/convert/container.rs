//! Binary tensor container.
//!
//! ```text
//! "JTC1" | header_len: u32 LE | header JSON | payload
//! ```
//!
//! The header is `{format_version, metadata, tensors}`, where `tensors` maps
//! each name to `{dtype: "f32", shape, byte_offset, byte_len}` in payload
//! order. Offsets are relative to the start of the payload, which holds raw
//! little-endian f32 values.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"JTC1";
pub const FORMAT_VERSION: u32 = 1;
/// Bytes before the header: magic plus the header length.
pub const PREAMBLE_LEN: u64 = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    metadata: Value,
    tensors: IndexMap<String, TensorEntry>,
}

/// Named tensors and metadata read from (or destined for) disk.
#[derive(Debug, Clone)]
pub struct Container {
    pub metadata: Value,
    pub tensors: IndexMap<String, Tensor>,
}

impl Container {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }
}

fn header_bytes(tensors: &[(String, &Tensor)], metadata: &Value) -> Result<Vec<u8>> {
    let mut entries = IndexMap::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        let byte_len = t.bytes() as u64;
        let entry = TensorEntry {
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            byte_offset: offset,
            byte_len,
        };
        if entries.insert(name.clone(), entry).is_some() {
            return Err(Error::MalformedHeader(format!("duplicate tensor name {name:?}")));
        }
        offset += byte_len;
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        metadata: metadata.clone(),
        tensors: entries,
    };
    Ok(serde_json::to_vec(&header).expect("header serializes"))
}

/// Writes `tensors` in the given order.
pub fn write_container(tensors: &[(String, &Tensor)], metadata: &Value, path: &Path) -> Result<()> {
    let header = header_bytes(tensors, metadata)?;
    let header_len = u32::try_from(header.len()).map_err(|_| Error::MalformedHeader("header exceeds 4 GiB".into()))?;
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&header_len.to_le_bytes()).map_err(io)?;
    out.write_all(&header).map_err(io)?;
    for (_, t) in tensors {
        let mut buf = Vec::with_capacity(t.bytes());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf).map_err(io)?;
    }
    out.flush().map_err(io)
}

fn validate(header: &Header, payload_len: u64) -> Result<()> {
    if header.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: header.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let mut end = 0u64;
    for (name, e) in &header.tensors {
        if e.dtype != "f32" {
            return Err(Error::MalformedHeader(format!("{name}: unsupported dtype {:?}", e.dtype)));
        }
        let numel = e
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| Error::MalformedHeader(format!("{name}: shape overflows")))?;
        if Some(e.byte_len) != numel.checked_mul(4) {
            return Err(Error::MalformedHeader(format!(
                "{name}: byte_len {} does not match shape {:?}",
                e.byte_len, e.shape
            )));
        }
        if e.byte_offset < end {
            return Err(Error::OutOfBounds(format!("{name}: offset {} overlaps or is out of order", e.byte_offset)));
        }
        end = e
            .byte_offset
            .checked_add(e.byte_len)
            .ok_or_else(|| Error::OutOfBounds(format!("{name}: range overflows")))?;
        if end > payload_len {
            return Err(Error::OutOfBounds(format!(
                "{name}: bytes {}..{end} exceed payload of {payload_len}",
                e.byte_offset
            )));
        }
    }
    Ok(())
}

/// Reads and validates a container. Magic, version and every byte range are
/// checked before the payload is read.
pub fn read_container(path: &Path) -> Result<Container> {
    let io = |e| Error::io(path, e);
    let mut file = File::open(path).map_err(io)?;
    let file_len = file.metadata().map_err(io)?.len();
    let mut preamble = [0u8; PREAMBLE_LEN as usize];
    if file_len < 4 {
        return Err(Error::BadMagic);
    }
    if file_len < PREAMBLE_LEN {
        file.read_exact(&mut preamble[..4]).map_err(io)?;
        if &preamble[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        return Err(Error::Truncated {
            needed: PREAMBLE_LEN,
            actual: file_len,
        });
    }
    file.read_exact(&mut preamble).map_err(io)?;
    if &preamble[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let header_len = u32::from_le_bytes(preamble[4..8].try_into().expect("4 bytes")) as u64;
    let payload_start = PREAMBLE_LEN + header_len;
    if file_len < payload_start {
        return Err(Error::Truncated {
            needed: payload_start,
            actual: file_len,
        });
    }
    let mut raw = vec![0u8; header_len as usize];
    file.read_exact(&mut raw).map_err(io)?;
    let header: Header = serde_json::from_slice(&raw).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let payload_len = file_len - payload_start;
    validate(&header, payload_len)?;

    let mut payload = Vec::with_capacity(payload_len as usize);
    file.read_to_end(&mut payload).map_err(io)?;
    let tensors = header
        .tensors
        .into_iter()
        .map(|(name, e)| {
            let bytes = &payload[e.byte_offset as usize..(e.byte_offset + e.byte_len) as usize];
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Ok((name, Tensor::new(&e.shape, data)?))
        })
        .collect::<Result<_>>()?;
    Ok(Container {
        metadata: header.metadata,
        tensors,
    })
}
