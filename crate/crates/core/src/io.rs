//! File helpers: atomic writes, config digests and the binary tensor container.
//!
//! Container layout: the 8-byte magic `BCKPT001`, a little-endian `u64`
//! header length, a UTF-8 JSON header `{"meta": …, "tensors": [{name,
//! shape, offset}]}`, then the tensors as little-endian `f32` values.
//! Offsets are in bytes from the start of the data section.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BCKPT001";

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Short hex SHA-256 of a value's canonical JSON.
pub fn digest_of<T: Serialize>(value: &T) -> Result<String> {
    let canonical = serde_json::to_value(value)?;
    let bytes = serde_json::to_vec(&canonical)?;
    let hash = Sha256::digest(&bytes);
    Ok(hex::encode(&hash[..8]))
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    #[serde(default, skip_serializing_if = "Dtype::is_f32")]
    dtype: Dtype,
}

/// Element encoding of a stored tensor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    fn is_f32(&self) -> bool {
        *self == Dtype::F32
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn encode_container(meta: &serde_json::Value, tensors: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let typed: Vec<(&str, &Tensor, Dtype)> = tensors.iter().map(|&(n, t)| (n, t, Dtype::F32)).collect();
    encode_container_typed(meta, &typed)
}

/// Like [`encode_container`] with a per-tensor element type.
pub fn encode_container_typed(meta: &serde_json::Value, tensors: &[(&str, &Tensor, Dtype)]) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let entries = tensors
        .iter()
        .map(|&(name, t, dtype)| {
            let e = TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                dtype,
            };
            offset += (dtype.width() * t.len()) as u64;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        meta: meta.clone(),
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for &(_, t, dtype) in tensors {
        for &v in t.data() {
            match dtype {
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Data("not a BCKPT001 container".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Data("container header truncated".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..body]).map_err(|e| Error::Data(format!("container header: {e}")))?;
    let data = &bytes[body..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let width = e.dtype.width();
        let end = n
            .checked_mul(width)
            .and_then(|len| start.checked_add(len))
            .filter(|&end| end <= data.len())
            .ok_or_else(|| Error::Data(format!("tensor `{}` runs past the end of the file", e.name)))?;
        let values = data[start..end]
            .chunks_exact(width)
            .map(|c| match e.dtype {
                Dtype::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
                Dtype::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
            })
            .collect();
        tensors.push((e.name, Tensor::new(e.shape, values)?));
    }
    Ok((header.meta, tensors))
}

/// Little-endian `f32` encoding of a sequence of values.
pub fn f32_bytes(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values
        .into_iter()
        .flat_map(|v| (v as f32).to_le_bytes())
        .collect()
}

pub fn f32_values(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Data(format!("{} bytes is not a whole number of f32 values", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip_of_f32_values_is_exact() {
        let mut a = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.2);
        a.round_to_f32();
        let b = Tensor::scalar(1.5);
        let meta = serde_json::json!({"kind": "test", "n": 3});
        let bytes = encode_container(&meta, &[("a", &a), ("b", &b)]).unwrap();
        assert_eq!(&bytes[..8], b"BCKPT001");
        let (m, ts) = decode_container(&bytes).unwrap();
        assert_eq!(m, meta);
        assert_eq!(ts[0], ("a".to_string(), a));
        assert_eq!(ts[1], ("b".to_string(), b));
        let again = encode_container(&m, &[("a", &ts[0].1), ("b", &ts[1].1)]).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn f64_tensors_round_trip_at_full_precision() {
        let a = Tensor::from_fn(&[5], |i| (i as f64 + 1.0).sqrt() / 7.0);
        let b = Tensor::from_fn(&[2], |i| i as f64 / 3.0);
        let bytes = encode_container_typed(
            &serde_json::Value::Null,
            &[("a", &a, Dtype::F64), ("b", &b, Dtype::F32)],
        )
        .unwrap();
        let (_, ts) = decode_container(&bytes).unwrap();
        assert_eq!(ts[0].1, a);
        assert_eq!(ts[1].1.data()[1], (1.0f64 / 3.0) as f32 as f64);
    }

    #[test]
    fn corrupt_containers_are_rejected() {
        assert!(decode_container(b"NOTMAGIC\0\0\0\0\0\0\0\0").is_err());
        let t = Tensor::zeros(&[4]);
        let bytes = encode_container(&serde_json::json!({}), &[("t", &t)]).unwrap();
        assert!(decode_container(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn digest_is_stable() {
        let d1 = digest_of(&serde_json::json!({"b": 1, "a": 2})).unwrap();
        let d2 = digest_of(&serde_json::json!({"a": 2, "b": 1})).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(d1.len(), 16);
    }
}
