//! Named-tensor checkpoints and their single-file container.
//!
//! The on-disk layout is the common "safetensors" container:
//!
//! ```text
//! [u64 LE header length N][N bytes of UTF-8 JSON header][raw little-endian data]
//! ```
//!
//! The header maps each tensor name to `{"dtype", "shape", "data_offsets"}` and may
//! carry a `"__metadata__"` object of string pairs. Offsets are relative to the first
//! byte after the header. Only `F32` and `F64` payloads are accepted.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer};
use serde_json::{json, Value};
use thiserror::Error;

const METADATA_KEY: &str = "__metadata__";

/// Tags that exist in the container format but are not floating-point parameter types
/// this toolkit merges.
const KNOWN_UNSUPPORTED: &[&str] = &[
    "F16", "BF16", "F8_E4M3", "F8_E5M2", "I8", "I16", "I32", "I64", "U8", "U16", "U32", "U64",
    "BOOL",
];

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header length: {0}")]
    HeaderLength(String),
    #[error("header is not valid JSON: {0}")]
    HeaderJson(String),
    #[error("malformed header entry for {name:?}: {reason}")]
    HeaderEntry { name: String, reason: String },
    #[error("unknown dtype tag {tag:?} for tensor {name:?}")]
    UnknownDtype { name: String, tag: String },
    #[error("unsupported dtype {tag:?} for tensor {name:?}: only F32 and F64 are accepted")]
    UnsupportedDtype { name: String, tag: String },
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("invalid tensor name {0:?}: names must be non-empty printable ASCII")]
    InvalidName(String),
    #[error("overlapping ranges: {first:?} and {second:?}")]
    OverlappingRanges { first: String, second: String },
    #[error("out-of-bounds data range for {name:?}: [{begin}, {end}) exceeds data block of {len} bytes")]
    OutOfBounds {
        name: String,
        begin: usize,
        end: usize,
        len: usize,
    },
    #[error("data block not fully covered: {0}")]
    Coverage(String),
    #[error("tensor {name:?}: shape {shape:?} needs {expected} elements but {actual} were given")]
    ElementCount {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("dtype mismatch: {0} vs {1}")]
    DtypeMismatch(Dtype, Dtype),
}

pub type Result<T> = std::result::Result<T, StoreError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F64 => "F64",
        }
    }

    pub fn size_in_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn from_tag(name: &str, tag: &str) -> Result<Self> {
        match tag {
            "F32" => Ok(Dtype::F32),
            "F64" => Ok(Dtype::F64),
            t if KNOWN_UNSUPPORTED.contains(&t) => Err(StoreError::UnsupportedDtype {
                name: name.to_string(),
                tag: t.to_string(),
            }),
            t => Err(StoreError::UnknownDtype {
                name: name.to_string(),
                tag: t.to_string(),
            }),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }
}

/// A dense row-major tensor. An empty shape denotes a scalar holding one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

pub fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let expected = element_count(&shape);
        if expected != data.len() {
            return Err(StoreError::ElementCount {
                name: String::new(),
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, TensorData::F64(data))
    }

    pub fn scalar_f32(value: f32) -> Self {
        Self {
            shape: Vec::new(),
            data: TensorData::F32(vec![value]),
        }
    }

    pub fn scalar_f64(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: TensorData::F64(vec![value]),
        }
    }

    pub fn zeros(dtype: Dtype, shape: Vec<usize>) -> Self {
        let n = element_count(&shape);
        let data = match dtype {
            Dtype::F32 => TensorData::F32(vec![0.0; n]),
            Dtype::F64 => TensorData::F64(vec![0.0; n]),
        };
        Self { shape, data }
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Element `i` widened to f64.
    pub fn get_f64(&self, i: usize) -> f64 {
        match &self.data {
            TensorData::F32(v) => f64::from(v[i]),
            TensorData::F64(v) => v[i],
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    /// Builds a tensor of the given dtype from f64 values, rounding once.
    pub fn from_f64_values(dtype: Dtype, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let data = match dtype {
            Dtype::F32 => TensorData::F32(values.into_iter().map(|x| x as f32).collect()),
            Dtype::F64 => TensorData::F64(values),
        };
        Self::new(shape, data)
    }

    /// Bitwise equality of dtype, shape and every element.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: Dtype, shape: Vec<usize>, bytes: &[u8]) -> Self {
        let data = match dtype {
            Dtype::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
            ),
            Dtype::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
                    .collect(),
            ),
        };
        Self { shape, data }
    }
}

/// Returns `c1 * t1 + c2 * t2` elementwise.
///
/// Each element is accumulated in f64 as `c1*t1[i] + c2*t2[i]` and rounded once to the
/// shared dtype. A term whose coefficient is zero is dropped when its operand is finite,
/// so `axpy(1, t, 0, u)` returns `t` bitwise (including signed zeros).
pub fn axpy_tensors(c1: f64, t1: &Tensor, c2: f64, t2: &Tensor) -> Result<Tensor> {
    if t1.shape != t2.shape {
        return Err(StoreError::ShapeMismatch(t1.shape.clone(), t2.shape.clone()));
    }
    if t1.dtype() != t2.dtype() {
        return Err(StoreError::DtypeMismatch(t1.dtype(), t2.dtype()));
    }
    let data = match (&t1.data, &t2.data) {
        (TensorData::F32(a), TensorData::F32(b)) => TensorData::F32(
            a.iter()
                .zip(b)
                .map(|(&x, &y)| combine(c1, f64::from(x), c2, f64::from(y)) as f32)
                .collect(),
        ),
        (TensorData::F64(a), TensorData::F64(b)) => TensorData::F64(
            a.iter()
                .zip(b)
                .map(|(&x, &y)| combine(c1, x, c2, y))
                .collect(),
        ),
        _ => unreachable!("dtypes checked above"),
    };
    Ok(Tensor {
        shape: t1.shape.clone(),
        data,
    })
}

#[inline]
pub(crate) fn combine(c1: f64, x: f64, c2: f64, y: f64) -> f64 {
    if c2 == 0.0 && y.is_finite() {
        c1 * x
    } else if c1 == 0.0 && x.is_finite() {
        c2 * y
    } else {
        c1 * x + c2 * y
    }
}

pub fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() || !name.bytes().all(|b| (0x20..=0x7e).contains(&b)) {
        return Err(StoreError::InvalidName(name.to_string()));
    }
    if name == METADATA_KEY {
        return Err(StoreError::InvalidName(name.to_string()));
    }
    Ok(())
}

/// One entry of a checkpoint's schema: name, dtype and shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

/// Ordered name → tensor map plus free-form string metadata.
///
/// Iteration order is lexicographic by name regardless of insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a checkpoint, rejecting duplicate or malformed names.
    pub fn from_tensors<I, S>(tensors: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Tensor)>,
        S: Into<String>,
    {
        let mut ckpt = Self::new();
        for (name, tensor) in tensors {
            ckpt.insert(name, tensor)?;
        }
        Ok(ckpt)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        validate_name(&name)?;
        if self.tensors.contains_key(&name) {
            return Err(StoreError::DuplicateName(name));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    /// Replaces an existing tensor; the shape and dtype must match.
    pub fn replace(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| StoreError::HeaderEntry {
                name: name.to_string(),
                reason: "no such tensor".to_string(),
            })?;
        if slot.shape != tensor.shape {
            return Err(StoreError::ShapeMismatch(slot.shape.clone(), tensor.shape));
        }
        if slot.dtype() != tensor.dtype() {
            return Err(StoreError::DtypeMismatch(slot.dtype(), tensor.dtype()));
        }
        *slot = tensor;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    pub fn with_metadata(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub fn schema(&self) -> Vec<SchemaEntry> {
        self.tensors
            .iter()
            .map(|(name, t)| SchemaEntry {
                name: name.clone(),
                dtype: t.dtype(),
                shape: t.shape.clone(),
            })
            .collect()
    }

    /// Names whose presence, dtype or shape differ between the two checkpoints, in
    /// lexicographic order.
    pub fn schema_differences(&self, other: &Checkpoint) -> Vec<String> {
        let mut names: Vec<&String> = self.tensors.keys().chain(other.tensors.keys()).collect();
        names.sort();
        names.dedup();
        names
            .into_iter()
            .filter(|name| match (self.tensors.get(*name), other.tensors.get(*name)) {
                (Some(a), Some(b)) => a.shape != b.shape || a.dtype() != b.dtype(),
                _ => true,
            })
            .cloned()
            .collect()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Bitwise equality of every tensor; metadata is ignored.
    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }

    /// Serializes to the container layout. Tensors are packed in lexicographic order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = serde_json::Map::new();
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let size = t.len() * t.dtype().size_in_bytes();
            header.insert(
                name.clone(),
                json!({
                    "dtype": t.dtype().tag(),
                    "shape": t.shape,
                    "data_offsets": [offset, offset + size],
                }),
            );
            offset += size;
        }
        if !self.metadata.is_empty() {
            header.insert(METADATA_KEY.to_string(), json!(self.metadata));
        }
        let mut header_bytes = serde_json::to_vec(&Value::Object(header))
            .expect("header of strings and integers always serializes");
        // Pad with spaces so the data block starts 8-byte aligned.
        while (header_bytes.len() + 8) % 8 != 0 {
            header_bytes.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for t in self.tensors.values() {
            t.write_le(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(StoreError::HeaderLength(format!(
                "file has {} bytes, fewer than the 8-byte length prefix",
                bytes.len()
            )));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let available = (bytes.len() - 8) as u64;
        if n > available {
            return Err(StoreError::HeaderLength(format!(
                "declared {n} header bytes but only {available} follow the prefix"
            )));
        }
        let n = n as usize;
        let header_text = std::str::from_utf8(&bytes[8..8 + n])
            .map_err(|e| StoreError::HeaderJson(format!("header is not UTF-8: {e}")))?;
        let RawHeader(entries) = serde_json::from_str(header_text)
            .map_err(|e| StoreError::HeaderJson(e.to_string()))?;
        let data = &bytes[8 + n..];

        let mut metadata = BTreeMap::new();
        let mut seen_metadata = false;
        let mut specs: Vec<(String, Dtype, Vec<usize>, usize, usize)> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (name, value) in entries {
            if name == METADATA_KEY {
                if seen_metadata {
                    return Err(StoreError::DuplicateName(name));
                }
                seen_metadata = true;
                metadata = parse_metadata(value)?;
                continue;
            }
            if !seen.insert(name.clone()) {
                return Err(StoreError::DuplicateName(name));
            }
            validate_name(&name)?;
            let (dtype, shape, begin, end) = parse_entry(&name, &value)?;
            specs.push((name, dtype, shape, begin, end));
        }

        // Ranges must be in-bounds, consistent with shape, non-overlapping and cover the block.
        for (name, dtype, shape, begin, end) in &specs {
            if begin > end || *end > data.len() {
                return Err(StoreError::OutOfBounds {
                    name: name.clone(),
                    begin: *begin,
                    end: *end,
                    len: data.len(),
                });
            }
            let expected = element_count(shape) * dtype.size_in_bytes();
            if end - begin != expected {
                return Err(StoreError::ElementCount {
                    name: name.clone(),
                    shape: shape.clone(),
                    expected: element_count(shape),
                    actual: (end - begin) / dtype.size_in_bytes(),
                });
            }
        }
        let mut order: Vec<usize> = (0..specs.len()).collect();
        order.sort_by_key(|&i| (specs[i].3, specs[i].4));
        let mut cursor = 0usize;
        let mut prev: Option<usize> = None;
        for &i in &order {
            let (name, _, _, begin, end) = &specs[i];
            if *begin < cursor {
                let first = prev.map(|p| specs[p].0.clone()).unwrap_or_default();
                return Err(StoreError::OverlappingRanges {
                    first,
                    second: name.clone(),
                });
            }
            if *begin > cursor {
                return Err(StoreError::Coverage(format!(
                    "gap of {} bytes before {name:?}",
                    begin - cursor
                )));
            }
            // Zero-length tensors may share an offset with a neighbour.
            if end > begin {
                prev = Some(i);
            }
            cursor = *end;
        }
        if cursor != data.len() {
            return Err(StoreError::Coverage(format!(
                "{} trailing bytes not claimed by any tensor",
                data.len() - cursor
            )));
        }

        let mut ckpt = Checkpoint::new();
        ckpt.metadata = metadata;
        for (name, dtype, shape, begin, end) in specs {
            let t = Tensor::read_le(dtype, shape, &data[begin..end]);
            ckpt.tensors.insert(name, t);
        }
        Ok(ckpt)
    }
}

/// Header object read as an ordered list of pairs so duplicate keys are observable.
struct RawHeader(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct HeaderVisitor;
        impl<'de> Visitor<'de> for HeaderVisitor {
            type Value = RawHeader;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RawHeader, A::Error> {
                let mut entries = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    entries.push((k, v));
                }
                Ok(RawHeader(entries))
            }
        }
        deserializer.deserialize_map(HeaderVisitor)
    }
}

fn parse_metadata(value: Value) -> Result<BTreeMap<String, String>> {
    let bad = |reason: &str| StoreError::HeaderEntry {
        name: METADATA_KEY.to_string(),
        reason: reason.to_string(),
    };
    let Value::Object(map) = value else {
        return Err(bad("metadata must be an object"));
    };
    map.into_iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k, s)),
            _ => Err(bad("metadata values must be strings")),
        })
        .collect()
}

fn parse_entry(name: &str, value: &Value) -> Result<(Dtype, Vec<usize>, usize, usize)> {
    let bad = |reason: &str| StoreError::HeaderEntry {
        name: name.to_string(),
        reason: reason.to_string(),
    };
    let obj = value.as_object().ok_or_else(|| bad("entry must be an object"))?;
    let tag = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("missing string field \"dtype\""))?;
    let dtype = Dtype::from_tag(name, tag)?;
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing array field \"shape\""))?
        .iter()
        .map(|v| v.as_u64().map(|x| x as usize))
        .collect::<Option<Vec<usize>>>()
        .ok_or_else(|| bad("shape extents must be non-negative integers"))?;
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing array field \"data_offsets\""))?;
    if offsets.len() != 2 {
        return Err(bad("data_offsets must have exactly two entries"));
    }
    let begin = offsets[0].as_u64().ok_or_else(|| bad("offsets must be integers"))? as usize;
    let end = offsets[1].as_u64().ok_or_else(|| bad("offsets must be integers"))? as usize;
    Ok((dtype, shape, begin, end))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    Checkpoint::from_bytes(&bytes)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

/// Concatenates every tensor in lexicographic name order, row-major, widened to f64.
pub fn flatten_checkpoint(ckpt: &Checkpoint) -> Vec<f64> {
    let mut out = Vec::with_capacity(ckpt.numel());
    for t in ckpt.tensors.values() {
        match &t.data {
            TensorData::F32(v) => out.extend(v.iter().map(|&x| f64::from(x))),
            TensorData::F64(v) => out.extend_from_slice(v),
        }
    }
    out
}
