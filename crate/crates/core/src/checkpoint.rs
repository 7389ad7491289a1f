//! Named-tensor container shared by checkpoints and stream exports.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "OLRA" | version: u32 | header_len: u64 | header: UTF-8 JSON | payload
//! ```
//!
//! The header maps each tensor name to `{"shape": [..], "dtype": "f32",
//! "byte_offset": n}` where `byte_offset` is relative to the start of the
//! payload. Payloads are raw little-endian `f32` values laid out in header key
//! order. Names are sorted, so identical contents always produce identical
//! bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"OLRA";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

/// An ordered collection of named `f32` tensors.
pub type TensorMap = BTreeMap<String, Tensor<f32>>;

pub fn encode(tensors: &TensorMap) -> Result<Vec<u8>> {
    let mut header = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in tensors {
        header.insert(
            name.clone(),
            Entry {
                shape: t.shape().to_vec(),
                dtype: "f32".to_string(),
                byte_offset: offset,
            },
        );
        offset += 4 * t.numel() as u64;
    }
    let header = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<TensorMap> {
    let fail = |m: &str| Error::Format(m.to_string());
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(fail("missing OLRA magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fail("header runs past end of file"))?;
    let header: BTreeMap<String, Entry> = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| Error::Format(format!("header: {e}")))?;
    let payload = &bytes[payload_start..];
    let mut out = TensorMap::new();
    for (name, entry) in header {
        if entry.dtype != "f32" {
            return Err(Error::Format(format!("{name}: dtype {}", entry.dtype)));
        }
        let numel: usize = entry.shape.iter().product();
        let start = entry.byte_offset as usize;
        let end = start + 4 * numel;
        if end > payload.len() {
            return Err(Error::Format(format!("{name}: payload out of range")));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.insert(name, Tensor::new(&entry.shape, data)?);
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &TensorMap) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, encode(tensors)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TensorMap> {
    decode(&fs::read(path)?)
}

/// Fetches a tensor by name or reports it missing.
pub fn take(map: &mut TensorMap, name: &str) -> Result<Tensor<f32>> {
    map.remove(name)
        .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_as_documented() {
        let mut m = TensorMap::new();
        m.insert("w".into(), Tensor::new(&[2], vec![1.0, -2.5]).unwrap());
        let bytes = encode(&m).unwrap();
        assert_eq!(&bytes[..4], b"OLRA");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let hl = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + hl]).unwrap();
        assert_eq!(header, r#"{"w":{"shape":[2],"dtype":"f32","byte_offset":0}}"#);
        assert_eq!(&bytes[16 + hl..16 + hl + 4], &1.0f32.to_le_bytes());
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(decode(b"NOPE").is_err());
        let mut m = TensorMap::new();
        m.insert("w".into(), Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let bytes = encode(&m).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(
            values in prop::collection::vec(prop::collection::vec(any::<u32>(), 1..20), 1..5)
        ) {
            let mut m = TensorMap::new();
            for (i, raw) in values.iter().enumerate() {
                let data: Vec<f32> = raw.iter().map(|&b| f32::from_bits(b)).collect();
                m.insert(format!("t{i}"), Tensor::new(&[data.len()], data).unwrap());
            }
            let back = decode(&encode(&m).unwrap()).unwrap();
            prop_assert_eq!(back.len(), m.len());
            for (k, t) in &m {
                let b = &back[k];
                prop_assert_eq!(b.shape(), t.shape());
                let lhs: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
                let rhs: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(lhs, rhs);
            }
        }
    }
}
