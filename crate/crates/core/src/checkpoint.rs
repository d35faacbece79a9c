//! Reader and canonical writer for the safetensors container.
//!
//! Layout:
//!
//! ```text
//! [ u64 LE header length N ][ N bytes UTF-8 JSON header ][ data region ]
//! ```
//!
//! The header maps tensor names to `{"dtype", "shape", "data_offsets"}` with
//! offsets relative to the start of the data region, plus an optional
//! `"__metadata__"` object of string values.
//!
//! The writer always produces the canonical form: metadata first, tensors in
//! lexicographic name order, payload packed contiguously in that order, and a
//! compact header with no padding or whitespace. Parsing a canonical file and
//! serializing it again reproduces the input byte for byte.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::Deserialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorFileEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub byte_range: Range<usize>,
}

impl TensorFileEntry {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Default)]
pub struct TensorFile {
    metadata: BTreeMap<String, String>,
    entries: BTreeMap<String, TensorFileEntry>,
    payload: Vec<u8>,
}

fn byte_len(name: &str, dtype: DType, shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(dtype.byte_width(), |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::BadOffsets {
            name: name.to_string(),
            reason: format!("shape {shape:?} overflows"),
        })
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn entries(&self) -> impl Iterator<Item = &TensorFileEntry> {
        self.entries.values()
    }

    pub fn entry(&self, name: &str) -> Option<&TensorFileEntry> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    /// Raw little-endian bytes of a tensor.
    pub fn raw(&self, name: &str) -> Option<&[u8]> {
        self.entries.get(name).map(|e| &self.payload[e.byte_range.clone()])
    }

    /// Appends a tensor given its raw encoded bytes. The container accepts any
    /// shape, including the empty (scalar) shape.
    pub fn push_raw(&mut self, name: impl Into<String>, dtype: DType, shape: Vec<usize>, bytes: &[u8]) -> Result<()> {
        let name = name.into();
        if name == METADATA_KEY {
            return Err(Error::MalformedHeader(format!("{METADATA_KEY} is not a tensor name")));
        }
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        let expected = byte_len(&name, dtype, &shape)?;
        if expected != bytes.len() {
            return Err(Error::BadOffsets {
                name,
                reason: format!("{} bytes supplied, shape needs {expected}", bytes.len()),
            });
        }
        let begin = self.payload.len();
        self.payload.extend_from_slice(bytes);
        let entry = TensorFileEntry {
            name: name.clone(),
            dtype,
            shape,
            byte_range: begin..self.payload.len(),
        };
        self.entries.insert(name, entry);
        Ok(())
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, tensor: &Tensor) -> Result<()> {
        let bytes = tensor.to_bytes()?;
        self.push_raw(name, tensor.dtype(), tensor.shape().to_vec(), &bytes)
    }

    /// Scalar F32 stored with the empty shape, as community checkpoints do for
    /// per-module alpha values.
    pub fn push_scalar(&mut self, name: impl Into<String>, value: f32) -> Result<()> {
        self.push_raw(name, DType::F32, Vec::new(), &value.to_le_bytes())
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| Error::MissingLabel(name.to_string()))?;
        Tensor::from_bytes(
            entry.dtype,
            entry.shape.clone(),
            &self.payload[entry.byte_range.clone()],
        )
    }

    /// Reads a single-element tensor of any shape (`[]`, `[1]`, `[1, 1]`, ...).
    pub fn scalar(&self, name: &str) -> Result<f32> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| Error::MissingLabel(name.to_string()))?;
        if entry.element_count() != 1 {
            return Err(Error::InvalidShape(entry.shape.clone()));
        }
        let t = Tensor::from_bytes(entry.dtype, vec![1], &self.payload[entry.byte_range.clone()])?;
        Ok(t.data()[0])
    }

    /// Equality of the logical content: metadata, names, dtypes, shapes and
    /// tensor bytes. Offsets and payload layout are ignored.
    pub fn model_eq(&self, other: &TensorFile) -> bool {
        self.metadata == other.metadata
            && self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((na, a), (nb, b))| {
                na == nb
                    && a.dtype == b.dtype
                    && a.shape == b.shape
                    && self.payload[a.byte_range.clone()] == other.payload[b.byte_range.clone()]
            })
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Truncated(format!(
                "{} bytes, need at least 8 for the header length",
                bytes.len()
            )));
        }
        let declared = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let available = (bytes.len() - 8) as u64;
        if declared > available {
            return Err(Error::Truncated(format!(
                "header length {declared} exceeds the {available} bytes that follow"
            )));
        }
        let header_end = 8 + declared as usize;
        let header = std::str::from_utf8(&bytes[8..header_end])
            .map_err(|e| Error::MalformedHeader(format!("header is not UTF-8: {e}")))?;
        let raw: RawHeader = serde_json::from_str(header).map_err(|e| Error::MalformedHeader(e.to_string()))?;
        let data = &bytes[header_end..];

        let mut file = TensorFile {
            metadata: BTreeMap::new(),
            entries: BTreeMap::new(),
            payload: data.to_vec(),
        };
        let mut seen_metadata = false;
        for (key, value) in raw.0 {
            if key == METADATA_KEY {
                if seen_metadata {
                    return Err(Error::DuplicateName(key));
                }
                seen_metadata = true;
                file.metadata = parse_metadata(value)?;
                continue;
            }
            if file.entries.contains_key(&key) {
                return Err(Error::DuplicateName(key));
            }
            let entry = parse_entry(&key, value, data.len())?;
            file.entries.insert(key, entry);
        }

        let mut ranges: Vec<&TensorFileEntry> = file.entries.values().filter(|e| !e.byte_range.is_empty()).collect();
        ranges.sort_by_key(|e| (e.byte_range.start, e.byte_range.end));
        for w in ranges.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b.byte_range.start < a.byte_range.end {
                return Err(Error::BadOffsets {
                    name: b.name.clone(),
                    reason: format!("overlaps {:?}", a.name),
                });
            }
        }
        Ok(file)
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut header = String::from("{");
        let mut first = true;
        let mut sep = |h: &mut String| {
            if !first {
                h.push(',');
            }
            first = false;
        };
        if !self.metadata.is_empty() {
            sep(&mut header);
            header.push_str(&json_str(METADATA_KEY));
            header.push_str(":{");
            for (i, (k, v)) in self.metadata.iter().enumerate() {
                if i > 0 {
                    header.push(',');
                }
                header.push_str(&json_str(k));
                header.push(':');
                header.push_str(&json_str(v));
            }
            header.push('}');
        }
        let mut offset = 0usize;
        let mut payload = Vec::with_capacity(self.payload.len());
        for (name, entry) in &self.entries {
            let len = entry.byte_range.len();
            sep(&mut header);
            header.push_str(&json_str(name));
            header.push_str(":{\"dtype\":");
            header.push_str(&json_str(entry.dtype.as_str()));
            header.push_str(",\"shape\":[");
            let dims: Vec<String> = entry.shape.iter().map(|d| d.to_string()).collect();
            header.push_str(&dims.join(","));
            header.push_str(&format!("],\"data_offsets\":[{},{}]}}", offset, offset + len));
            payload.extend_from_slice(&self.payload[entry.byte_range.clone()]);
            offset += len;
        }
        header.push('}');

        let mut out = Vec::with_capacity(8 + header.len() + payload.len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        TensorFile::parse(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.serialize()).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

fn parse_metadata(value: Value) -> Result<BTreeMap<String, String>> {
    let Value::Object(map) = value else {
        return Err(Error::MalformedHeader(format!("{METADATA_KEY} must be an object")));
    };
    map.into_iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k, s)),
            other => Err(Error::MalformedHeader(format!(
                "metadata value for {k:?} must be a string, got {other}"
            ))),
        })
        .collect()
}

fn as_usize(name: &str, v: &Value, what: &str) -> Result<usize> {
    v.as_u64()
        .and_then(|x| usize::try_from(x).ok())
        .ok_or_else(|| Error::MalformedHeader(format!("{name:?}: {what} must be a non-negative integer")))
}

fn parse_entry(name: &str, value: Value, data_len: usize) -> Result<TensorFileEntry> {
    let Value::Object(map) = value else {
        return Err(Error::MalformedHeader(format!("{name:?}: entry must be an object")));
    };
    let mut dtype = None;
    let mut shape = None;
    let mut offsets = None;
    for (k, v) in map {
        match k.as_str() {
            "dtype" => {
                let s = v
                    .as_str()
                    .ok_or_else(|| Error::MalformedHeader(format!("{name:?}: dtype must be a string")))?;
                dtype = Some(DType::parse(s)?);
            }
            "shape" => {
                let arr = v
                    .as_array()
                    .ok_or_else(|| Error::MalformedHeader(format!("{name:?}: shape must be an array")))?;
                shape = Some(
                    arr.iter()
                        .map(|d| as_usize(name, d, "shape entry"))
                        .collect::<Result<Vec<_>>>()?,
                );
            }
            "data_offsets" => {
                let arr = v
                    .as_array()
                    .filter(|a| a.len() == 2)
                    .ok_or_else(|| Error::MalformedHeader(format!("{name:?}: data_offsets must be [begin, end]")))?;
                offsets = Some((as_usize(name, &arr[0], "offset")?, as_usize(name, &arr[1], "offset")?));
            }
            other => {
                return Err(Error::MalformedHeader(format!("{name:?}: unexpected field {other:?}")));
            }
        }
    }
    let missing = |f: &str| Error::MalformedHeader(format!("{name:?}: missing {f}"));
    let dtype = dtype.ok_or_else(|| missing("dtype"))?;
    let shape = shape.ok_or_else(|| missing("shape"))?;
    let (begin, end) = offsets.ok_or_else(|| missing("data_offsets"))?;
    let bad = |reason: String| Error::BadOffsets {
        name: name.to_string(),
        reason,
    };
    if begin > end {
        return Err(bad(format!("begin {begin} > end {end}")));
    }
    if end > data_len {
        return Err(bad(format!("end {end} beyond data region of {data_len} bytes")));
    }
    let expected = byte_len(name, dtype, &shape)?;
    if end - begin != expected {
        return Err(bad(format!(
            "range holds {} bytes but {dtype} {shape:?} needs {expected}",
            end - begin
        )));
    }
    Ok(TensorFileEntry {
        name: name.to_string(),
        dtype,
        shape,
        byte_range: begin..end,
    })
}

/// Top-level header object with key order and duplicates preserved.
struct RawHeader(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = RawHeader;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RawHeader, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    out.push((k, v));
                }
                Ok(RawHeader(out))
            }
        }
        deserializer.deserialize_map(V).map_err(de::Error::custom)
    }
}
