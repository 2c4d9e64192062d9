//! Reader and writer for the safetensors container.
//!
//! Layout: an 8-byte little-endian header length `N`, then `N` bytes of UTF-8
//! JSON mapping tensor names to `{"dtype", "shape", "data_offsets"}` (plus an
//! optional `"__metadata__"` string map), then the data section. Offsets are
//! relative to the start of the data section; tensor bytes are little-endian
//! and row-major.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fp16::{self, Fp16Bits};

#[derive(Debug, Error)]
pub enum SafetensorsError {
    #[error("file is {0} bytes, too short for the header length field")]
    TooShort(usize),
    #[error("header length {header_len} exceeds file size {file_len}")]
    TruncatedHeader { header_len: u64, file_len: usize },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("tensor `{name}`: unknown dtype `{dtype}`")]
    UnknownDtype { name: String, dtype: String },
    #[error("tensor `{name}`: data range {begin}..{end} exceeds data section of {available} bytes")]
    TruncatedData {
        name: String,
        begin: usize,
        end: usize,
        available: usize,
    },
    #[error("tensor `{name}`: {bytes} bytes do not match shape {shape:?} of {dtype:?}")]
    SizeMismatch {
        name: String,
        shape: Vec<usize>,
        dtype: Dtype,
        bytes: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F16,
    BF16,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "F32" => Some(Dtype::F32),
            "F16" => Some(Dtype::F16),
            "BF16" => Some(Dtype::BF16),
            _ => None,
        }
    }
}

/// A decoded tensor. Values are widened to f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SafeTensors {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct RawEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

#[derive(Serialize)]
struct OutEntry<'a> {
    dtype: Dtype,
    shape: &'a [usize],
    data_offsets: [usize; 2],
}

pub fn bf16_to_f64(bits: u16) -> f64 {
    f32::from_bits((bits as u32) << 16) as f64
}

pub fn parse(bytes: &[u8]) -> Result<SafeTensors, SafetensorsError> {
    if bytes.len() < 8 {
        return Err(SafetensorsError::TooShort(bytes.len()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    if header_len > (bytes.len() - 8) as u64 {
        return Err(SafetensorsError::TruncatedHeader {
            header_len,
            file_len: bytes.len(),
        });
    }
    let header_end = 8 + header_len as usize;
    let header =
        std::str::from_utf8(&bytes[8..header_end]).map_err(|e| SafetensorsError::MalformedHeader(e.to_string()))?;
    let map: BTreeMap<String, serde_json::Value> =
        serde_json::from_str(header).map_err(|e| SafetensorsError::MalformedHeader(e.to_string()))?;
    let data = &bytes[header_end..];

    let mut out = SafeTensors::default();
    for (name, value) in map {
        if name == "__metadata__" {
            out.metadata = serde_json::from_value(value)
                .map_err(|e| SafetensorsError::MalformedHeader(format!("__metadata__: {e}")))?;
            continue;
        }
        let raw: RawEntry =
            serde_json::from_value(value).map_err(|e| SafetensorsError::MalformedHeader(format!("{name}: {e}")))?;
        let dtype = Dtype::parse(&raw.dtype).ok_or_else(|| SafetensorsError::UnknownDtype {
            name: name.clone(),
            dtype: raw.dtype.clone(),
        })?;
        let [begin, end] = raw.data_offsets;
        if begin > end || end > data.len() {
            return Err(SafetensorsError::TruncatedData {
                name,
                begin,
                end,
                available: data.len(),
            });
        }
        let count: usize = raw.shape.iter().product();
        let bytes = &data[begin..end];
        if count.checked_mul(dtype.size()) != Some(bytes.len()) {
            return Err(SafetensorsError::SizeMismatch {
                name,
                shape: raw.shape,
                dtype,
                bytes: bytes.len(),
            });
        }
        let values = match dtype {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F16 => bytes
                .chunks_exact(2)
                .map(|c| fp16::decode(Fp16Bits(u16::from_le_bytes([c[0], c[1]]))))
                .collect(),
            Dtype::BF16 => bytes
                .chunks_exact(2)
                .map(|c| bf16_to_f64(u16::from_le_bytes([c[0], c[1]])))
                .collect(),
        };
        out.tensors.insert(
            name,
            Tensor {
                dtype,
                shape: raw.shape,
                data: values,
            },
        );
    }
    Ok(out)
}

/// Serialize tensors. Entries are laid out in name order; the header is
/// padded with spaces to a multiple of 8 bytes.
pub fn serialize(st: &SafeTensors) -> Vec<u8> {
    let mut header: BTreeMap<&str, serde_json::Value> = BTreeMap::new();
    let mut body = Vec::new();
    for (name, t) in &st.tensors {
        let begin = body.len();
        for &x in &t.data {
            match t.dtype {
                Dtype::F32 => body.extend_from_slice(&(x as f32).to_le_bytes()),
                Dtype::F16 => body.extend_from_slice(&fp16::encode(x).0.to_le_bytes()),
                Dtype::BF16 => {
                    // Round to nearest even on the upper half of the f32 pattern.
                    let bits = (x as f32).to_bits();
                    let rounded = if (x as f32).is_nan() {
                        0x7FC0
                    } else {
                        ((bits + 0x7FFF + ((bits >> 16) & 1)) >> 16) as u16
                    };
                    body.extend_from_slice(&rounded.to_le_bytes());
                }
            }
        }
        let entry = OutEntry {
            dtype: t.dtype,
            shape: &t.shape,
            data_offsets: [begin, body.len()],
        };
        header.insert(name, serde_json::to_value(entry).expect("entry serializes"));
    }
    if !st.metadata.is_empty() {
        header.insert(
            "__metadata__",
            serde_json::to_value(&st.metadata).expect("metadata serializes"),
        );
    }
    let mut json = serde_json::to_vec(&header).expect("header serializes");
    while !json.len().is_multiple_of(8) {
        json.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + json.len() + body.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&body);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file_with(header: &str, data: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn reads_hand_built_f32() {
        let values = [1.5f32, -2.25, 3.0e-8, 65536.0];
        let data: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let bytes = file_with(r#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#, &data);
        let st = parse(&bytes).unwrap();
        let t = &st.tensors["w"];
        assert_eq!(t.shape, [2, 2]);
        assert_eq!(t.data, values.map(|v| v as f64));
    }

    #[test]
    fn reads_f16_and_bf16() {
        let data = [0x00, 0x3C, 0x00, 0x40, 0x80, 0x3F, 0x40, 0xC0];
        let bytes = file_with(
            r#"{"h":{"dtype":"F16","shape":[2],"data_offsets":[0,4]},"b":{"dtype":"BF16","shape":[2],"data_offsets":[4,8]},"__metadata__":{"k":"v"}}"#,
            &data,
        );
        let st = parse(&bytes).unwrap();
        assert_eq!(st.tensors["h"].data, [1.0, 2.0]);
        assert_eq!(st.tensors["b"].data, [1.0, -3.0]);
        assert_eq!(st.metadata["k"], "v");
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(parse(&[1, 2, 3]), Err(SafetensorsError::TooShort(3))));

        let mut bytes = file_with("{}", &[]);
        bytes[0] = 200;
        assert!(matches!(parse(&bytes), Err(SafetensorsError::TruncatedHeader { .. })));

        let bytes = file_with("{not json", &[]);
        assert!(matches!(parse(&bytes), Err(SafetensorsError::MalformedHeader(_))));

        let bytes = file_with(r#"{"x":{"dtype":"I8","shape":[1],"data_offsets":[0,1]}}"#, &[0]);
        assert!(matches!(parse(&bytes), Err(SafetensorsError::UnknownDtype { .. })));

        let bytes = file_with(r#"{"x":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#, &[0; 4]);
        assert!(matches!(parse(&bytes), Err(SafetensorsError::TruncatedData { .. })));

        let bytes = file_with(r#"{"x":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}}"#, &[0; 8]);
        assert!(matches!(parse(&bytes), Err(SafetensorsError::SizeMismatch { .. })));
    }

    #[test]
    fn writer_round_trips() {
        let mut st = SafeTensors::default();
        st.tensors.insert(
            "a".into(),
            Tensor {
                dtype: Dtype::F32,
                shape: vec![3],
                data: vec![0.5, -1.0, 1e10f32 as f64],
            },
        );
        st.tensors.insert(
            "b".into(),
            Tensor {
                dtype: Dtype::F16,
                shape: vec![1, 2],
                data: vec![1.0, 65504.0],
            },
        );
        st.tensors.insert(
            "c".into(),
            Tensor {
                dtype: Dtype::BF16,
                shape: vec![2],
                data: vec![1.0, -0.375],
            },
        );
        st.metadata.insert("format".into(), "pt".into());
        let bytes = serialize(&st);
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        assert_eq!(header_len % 8, 0);
        assert_eq!(parse(&bytes).unwrap(), st);
        assert_eq!(serialize(&st), bytes);
    }
}
