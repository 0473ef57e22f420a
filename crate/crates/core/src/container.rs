//! Binary container shared by checkpoints and processed-data caches:
//! 8 magic bytes, a little-endian `u64` header length, a UTF-8 JSON header
//! carrying a tensor manifest, then the concatenated little-endian tensor
//! payloads in manifest order.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header<M> {
    #[serde(flatten)]
    meta: M,
    tensors: Vec<TensorEntry>,
}

pub(crate) fn encode<M: Serialize>(
    magic: &[u8; 8],
    meta: &M,
    tensors: &[(&str, &Tensor)],
    dtype: Dtype,
) -> Result<Vec<u8>> {
    let mut manifest = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        manifest.push(TensorEntry { name: (*name).to_string(), shape: [t.rows(), t.cols()], offset });
        offset += (t.len() * dtype.width()) as u64;
    }
    let header = serde_json::to_vec(&Header { meta, tensors: manifest })
        .map_err(|e| Error::parse(format!("header encode: {e}")))?;

    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for &v in t.data() {
            match dtype {
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    Ok(out)
}

/// Decodes a container. `check_version` runs on the raw header before the
/// typed metadata is parsed, so version errors win over schema errors.
pub(crate) fn decode<M: DeserializeOwned>(
    magic: &[u8; 8],
    bytes: &[u8],
    dtype: Dtype,
    check_version: impl FnOnce(&serde_json::Value) -> Result<()>,
) -> Result<(M, Vec<(String, Tensor)>)> {
    if bytes.len() < 16 {
        return Err(Error::parse("truncated file: missing preamble"));
    }
    if &bytes[..8] != magic {
        return Err(Error::parse("bad magic bytes"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::parse("truncated file: header extends past end"))?;
    let raw: serde_json::Value = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| Error::parse(format!("header is not valid JSON: {e}")))?;
    check_version(&raw)?;
    let header: Header<M> =
        serde_json::from_value(raw).map_err(|e| Error::parse(format!("header schema: {e}")))?;

    let blob = &bytes[header_end..];
    let width = dtype.width();
    let mut expected = 0u64;
    for entry in &header.tensors {
        if entry.offset != expected {
            return Err(Error::parse(format!("tensor {} has inconsistent offset", entry.name)));
        }
        expected += (entry.shape[0] * entry.shape[1] * width) as u64;
    }
    if expected != blob.len() as u64 {
        return Err(Error::parse(format!(
            "header/blob length inconsistency: manifest needs {expected} bytes, found {}",
            blob.len()
        )));
    }

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let start = entry.offset as usize;
        let n = entry.shape[0] * entry.shape[1];
        let chunk = &blob[start..start + n * width];
        let data: Vec<f64> = match dtype {
            Dtype::F32 => chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::F64 => chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
        };
        tensors.push((entry.name, Tensor::from_vec(entry.shape[0], entry.shape[1], data)?));
    }
    Ok((header.meta, tensors))
}

pub(crate) fn version_check(expected: u32) -> impl FnOnce(&serde_json::Value) -> Result<()> {
    move |raw| {
        let found = raw
            .get("version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::parse("header has no version field"))?;
        if found != u64::from(expected) {
            return Err(Error::UnsupportedVersion { found: found as u32, expected });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Meta {
        version: u32,
        note: String,
    }

    const MAGIC: &[u8; 8] = b"TESTCONT";

    fn sample() -> Vec<u8> {
        let t = Tensor::from_rows(&[vec![1.0, 2.5], vec![-3.0, 0.125]]).unwrap();
        let meta = Meta { version: 1, note: "x".into() };
        encode(MAGIC, &meta, &[("a", &t)], Dtype::F32).unwrap()
    }

    #[test]
    fn roundtrip_is_byte_exact() {
        let bytes = sample();
        let (meta, tensors): (Meta, _) = decode(MAGIC, &bytes, Dtype::F32, version_check(1)).unwrap();
        let refs: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        assert_eq!(encode(MAGIC, &meta, &refs, Dtype::F32).unwrap(), bytes);
    }

    #[test]
    fn detects_truncation_and_versions() {
        let bytes = sample();
        assert!(decode::<Meta>(MAGIC, &bytes[..bytes.len() - 1], Dtype::F32, version_check(1)).is_err());
        assert!(decode::<Meta>(MAGIC, &bytes[..10], Dtype::F32, version_check(1)).is_err());
        let err = decode::<Meta>(MAGIC, &bytes, Dtype::F32, version_check(2)).unwrap_err();
        assert!(matches!(err, Error::UnsupportedVersion { found: 1, expected: 2 }));
    }
}
