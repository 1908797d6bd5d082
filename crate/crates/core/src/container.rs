//! Binary container for weights, models, and raw tensors.
//!
//! Layout (little-endian):
//!   - 8-byte magic (e.g. `VLMW0001`)
//!   - u32 header length `N`
//!   - `N` bytes of UTF-8 JSON: a caller-defined metadata document plus a
//!     `tensors` array of `{name, shape, dtype, offset}` entries
//!   - zero padding up to the first 8-byte-aligned file position
//!   - raw scalar payload; every tensor offset is relative to the payload
//!     start and 8-byte aligned
//!
//! Readers reject unknown magics and dtype codes, truncated payloads, and
//! non-finite values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Element, Tensor};

pub const MAGIC_CNN: &[u8; 8] = b"VLMW0001";
pub const MAGIC_VLM: &[u8; 8] = b"VLMM0001";
pub const MAGIC_TENSOR: &[u8; 8] = b"VLMT0001";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderDoc {
    #[serde(flatten)]
    meta: serde_json::Value,
    tensors: Vec<TensorMeta>,
}

/// Write a container. `meta` must be a JSON object; tensor payloads are
/// appended in the given order at 8-byte-aligned offsets.
pub fn write<T: Element>(
    path: &Path,
    magic: &[u8; 8],
    meta: serde_json::Value,
    tensors: &[(String, &Tensor<T>)],
) -> Result<()> {
    if !meta.is_object() {
        return Err(Error::InvalidArgument("container metadata must be a JSON object".into()));
    }
    let mut payload: Vec<u8> = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, tensor) in tensors {
        while payload.len() % 8 != 0 {
            payload.push(0);
        }
        entries.push(TensorMeta {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            dtype: T::DTYPE.code().to_string(),
            offset: payload.len() as u64,
        });
        for &v in tensor.data() {
            v.write_le(&mut payload);
        }
    }
    let header = HeaderDoc {
        meta,
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut file: Vec<u8> = Vec::with_capacity(12 + header_bytes.len() + payload.len() + 8);
    file.extend_from_slice(magic);
    file.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    file.extend_from_slice(&header_bytes);
    while file.len() % 8 != 0 {
        file.push(0);
    }
    file.extend_from_slice(&payload);
    fs::write(path, file)?;
    Ok(())
}

/// Parsed container: metadata document plus lazily-decoded tensors.
#[derive(Debug)]
pub struct Container {
    pub meta: serde_json::Value,
    entries: Vec<TensorMeta>,
    payload: Vec<u8>,
}

impl Container {
    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn entry(&self, name: &str) -> Result<&TensorMeta> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    /// Decode a named tensor into precision `T`. The stored dtype must be
    /// `T` or narrower; narrowing conversions are rejected.
    pub fn tensor<T: Element>(&self, name: &str) -> Result<Tensor<T>> {
        let entry = self.entry(name)?;
        let dtype = Dtype::from_code(&entry.dtype)?;
        if dtype.size() > T::DTYPE.size() {
            return Err(Error::InvalidArgument(format!(
                "tensor '{}' stored as {} cannot be narrowed to {}",
                name,
                dtype.code(),
                T::DTYPE.code()
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let nbytes = numel * dtype.size();
        let start = entry.offset as usize;
        let end = start
            .checked_add(nbytes)
            .ok_or_else(|| Error::MalformedContainer(format!("tensor '{}' offset overflow", name)))?;
        if end > self.payload.len() {
            return Err(Error::TruncatedPayload {
                expected: end as u64,
                actual: self.payload.len() as u64,
            });
        }
        if start % 8 != 0 {
            return Err(Error::MalformedContainer(format!(
                "tensor '{}' offset {} is not 8-byte aligned",
                name, start
            )));
        }
        let bytes = &self.payload[start..end];
        let data: Vec<T> = match dtype {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::read_le(c) as f64))
                .collect(),
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::read_le(c)))
                .collect(),
        };
        let tensor = Tensor::from_vec(&entry.shape, data)?;
        if let Some((index, value)) = tensor.first_non_finite() {
            return Err(Error::NonFinite {
                context: format!("tensor '{}'", name),
                index,
                value: value.to_f64(),
            });
        }
        Ok(tensor)
    }
}

pub fn read(path: &Path, magic: &[u8; 8]) -> Result<Container> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 {
        return Err(Error::MalformedContainer(format!(
            "file is {} bytes, too short for magic and header length",
            bytes.len()
        )));
    }
    if &bytes[..8] != magic {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
        });
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or(Error::TruncatedPayload {
            expected: 12 + header_len as u64,
            actual: bytes.len() as u64,
        })?;
    let header: HeaderDoc = serde_json::from_slice(&bytes[12..header_end])?;
    let payload_start = header_end.div_ceil(8) * 8;
    let payload = if payload_start >= bytes.len() {
        Vec::new()
    } else {
        bytes[payload_start..].to_vec()
    };
    Ok(Container {
        meta: header.meta,
        entries: header.tensors,
        payload,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("cnnvlm-container-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let path = tmp("roundtrip.bin");
        let a = Tensor::from_vec(&[2, 3], vec![1.5f64, -2.25, 3.0, 0.1, 1e-30, 7.0]).unwrap();
        let b = Tensor::from_vec(&[3], vec![0.25f64, 0.5, 0.75]).unwrap();
        write(
            &path,
            MAGIC_TENSOR,
            json!({"kind": "test"}),
            &[("a".into(), &a), ("b".into(), &b)],
        )
        .unwrap();
        let c = read(&path, MAGIC_TENSOR).unwrap();
        assert_eq!(c.meta["kind"], "test");
        let a2: Tensor<f64> = c.tensor("a").unwrap();
        let b2: Tensor<f64> = c.tensor("b").unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);
        assert!(c.tensor::<f64>("missing").is_err());
    }

    #[test]
    fn bad_magic_rejected() {
        let path = tmp("magic.bin");
        let a = Tensor::<f64>::zeros(&[1]);
        write(&path, MAGIC_TENSOR, json!({}), &[("a".into(), &a)]).unwrap();
        let err = read(&path, MAGIC_CNN).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
    }

    #[test]
    fn truncated_payload_names_byte_counts() {
        let path = tmp("truncated.bin");
        let a = Tensor::from_vec(&[4], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        write(&path, MAGIC_TENSOR, json!({}), &[("a".into(), &a)]).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 9]).unwrap();
        let c = read(&path, MAGIC_TENSOR).unwrap();
        match c.tensor::<f64>("a").unwrap_err() {
            Error::TruncatedPayload { expected, actual } => {
                assert_eq!(expected, 32);
                assert!(actual < 32);
            }
            other => panic!("expected TruncatedPayload, got {other}"),
        }
    }

    #[test]
    fn unknown_dtype_rejected() {
        let path = tmp("dtype.bin");
        let a = Tensor::<f64>::zeros(&[1]);
        write(&path, MAGIC_TENSOR, json!({}), &[("a".into(), &a)]).unwrap();
        // swap the dtype code in the raw header
        let raw = std::fs::read(&path).unwrap();
        let patched = String::from_utf8_lossy(&raw[12..]).replace("\"f64\"", "\"f16\"");
        let header_len = u32::from_le_bytes(raw[8..12].try_into().unwrap()) as usize;
        let mut out = raw[..8].to_vec();
        let new_header = &patched.as_bytes()[..header_len];
        out.extend_from_slice(&(header_len as u32).to_le_bytes());
        out.extend_from_slice(new_header);
        out.extend_from_slice(&raw[12 + header_len..]);
        std::fs::write(&path, out).unwrap();
        let c = read(&path, MAGIC_TENSOR).unwrap();
        assert!(matches!(c.tensor::<f64>("a").unwrap_err(), Error::UnknownDtype(_)));
    }

    #[test]
    fn non_finite_payload_rejected() {
        let path = tmp("nonfinite.bin");
        let a = Tensor::from_vec(&[2], vec![1.0f64, f64::NAN]).unwrap();
        write(&path, MAGIC_TENSOR, json!({}), &[("a".into(), &a)]).unwrap();
        let c = read(&path, MAGIC_TENSOR).unwrap();
        match c.tensor::<f64>("a").unwrap_err() {
            Error::NonFinite { index, .. } => assert_eq!(index, 1),
            other => panic!("expected NonFinite, got {other}"),
        }
    }

    #[test]
    fn widening_allowed_narrowing_rejected() {
        let path = tmp("widen.bin");
        let a = Tensor::from_vec(&[2], vec![1.5f32, -0.25]).unwrap();
        write(&path, MAGIC_TENSOR, json!({}), &[("a".into(), &a)]).unwrap();
        let c = read(&path, MAGIC_TENSOR).unwrap();
        let wide: Tensor<f64> = c.tensor("a").unwrap();
        assert_eq!(wide.data(), &[1.5f64, -0.25]);

        let path64 = tmp("narrow.bin");
        let b = Tensor::from_vec(&[1], vec![1.0f64]).unwrap();
        write(&path64, MAGIC_TENSOR, json!({}), &[("b".into(), &b)]).unwrap();
        let c64 = read(&path64, MAGIC_TENSOR).unwrap();
        assert!(c64.tensor::<f32>("b").is_err());
    }
}
