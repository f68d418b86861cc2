//! Binary tensor container used for models and dataset samples.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    "INTQ"
//! version  u16 (= 1)
//! flags    u16 (= 0)
//! meta_len u32, then meta_len bytes of UTF-8 `key = value` lines
//! count    u32
//! count × { name_len u16, name, dtype u8, rank u8, dims u64 × rank,
//!           payload_len u64, payload }
//! ```
//!
//! Decoding is strict: unknown dtypes, payload lengths that disagree with
//! the shape, duplicate names or keys, and trailing bytes are all errors.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{format_err, Result};
use crate::tensor::{FloatTensor, IntTensor, Signedness};

pub const MAGIC: &[u8; 4] = b"INTQ";
pub const VERSION: u16 = 1;
pub const MAX_RANK: usize = 8;
const MAX_NAME_LEN: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F64 = 1,
    F32 = 2,
    I8 = 3,
    U8 = 4,
    I16 = 5,
    I32 = 6,
    I64 = 7,
}

impl DType {
    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            1 => Self::F64,
            2 => Self::F32,
            3 => Self::I8,
            4 => Self::U8,
            5 => Self::I16,
            6 => Self::I32,
            7 => Self::I64,
            _ => return Err(format_err(format!("unknown dtype tag {tag}"))),
        })
    }

    pub fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 => 2,
            Self::F32 | Self::I32 => 4,
            Self::F64 | Self::I64 => 8,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, Self::F32 | Self::F64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    Float(Vec<f64>),
    Int(Vec<i64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl StoredTensor {
    pub fn float(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self { dtype: DType::F64, shape, data: TensorData::Float(data) }
    }

    /// Integer tensor; fails if a value does not fit `dtype`.
    pub fn int(dtype: DType, shape: Vec<usize>, data: Vec<i64>) -> Result<Self> {
        if dtype.is_float() {
            return Err(format_err("integer data needs an integer dtype"));
        }
        let (lo, hi) = int_range(dtype);
        if let Some(v) = data.iter().find(|v| !(lo..=hi).contains(*v)) {
            return Err(format_err(format!("value {v} does not fit {dtype:?}")));
        }
        Ok(Self { dtype, shape, data: TensorData::Int(data) })
    }

    pub fn len(&self) -> usize {
        match &self.data {
            TensorData::Float(v) => v.len(),
            TensorData::Int(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_floats(&self) -> Result<Vec<f64>> {
        match &self.data {
            TensorData::Float(v) => Ok(v.clone()),
            TensorData::Int(_) => Err(format_err("expected a float tensor")),
        }
    }

    pub fn as_ints(&self) -> Result<&[i64]> {
        match &self.data {
            TensorData::Int(v) => Ok(v),
            TensorData::Float(_) => Err(format_err("expected an integer tensor")),
        }
    }

    pub fn to_float_tensor(&self) -> Result<FloatTensor> {
        FloatTensor::new(self.shape.clone(), self.as_floats()?).map_err(|e| format_err(e.to_string()))
    }

    pub fn to_int_tensor(&self, bits: u32, signedness: Signedness) -> Result<IntTensor> {
        IntTensor::new(self.shape.clone(), self.as_ints()?.to_vec(), bits, signedness)
            .map_err(|e| format_err(e.to_string()))
    }
}

fn int_range(dtype: DType) -> (i64, i64) {
    match dtype {
        DType::I8 => (i8::MIN.into(), i8::MAX.into()),
        DType::U8 => (0, u8::MAX.into()),
        DType::I16 => (i16::MIN.into(), i16::MAX.into()),
        DType::I32 => (i32::MIN.into(), i32::MAX.into()),
        _ => (i64::MIN, i64::MAX),
    }
}

/// Metadata plus an ordered set of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, StoredTensor>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.metadata.insert(key.into(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| format_err(format!("missing metadata key {key:?}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse().map_err(|_| format_err(format!("bad value {raw:?} for metadata key {key:?}")))
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: StoredTensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn tensor(&self, name: &str) -> Result<&StoredTensor> {
        self.tensors.get(name).ok_or_else(|| format_err(format!("missing tensor {name:?}")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        let meta = encode_metadata(&self.metadata)?;
        out.extend_from_slice(&len_u32(meta.len())?.to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&len_u32(self.tensors.len())?.to_le_bytes());
        for (name, t) in &self.tensors {
            if name.is_empty() || name.len() > MAX_NAME_LEN {
                return Err(format_err(format!("tensor name length {} out of range", name.len())));
            }
            if t.shape.len() > MAX_RANK {
                return Err(format_err(format!("tensor {name:?} has rank {} > {MAX_RANK}", t.shape.len())));
            }
            if element_count(&t.shape)? != t.len() {
                return Err(format_err(format!("tensor {name:?} shape {:?} disagrees with data", t.shape)));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype as u8);
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let payload = encode_payload(t)?;
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(format_err("bad magic"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let flags = r.u16()?;
        if flags != 0 {
            return Err(format_err(format!("unsupported flags {flags:#x}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?).map_err(|_| format_err("metadata is not UTF-8"))?;
        let metadata = parse_metadata(meta)?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            if name_len == 0 || name_len > MAX_NAME_LEN {
                return Err(format_err(format!("tensor name length {name_len} out of range")));
            }
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| format_err("tensor name is not UTF-8"))?
                .to_string();
            let dtype = DType::from_tag(r.u8()?)?;
            let rank = r.u8()? as usize;
            if rank > MAX_RANK {
                return Err(format_err(format!("rank {rank} > {MAX_RANK}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| format_err("dimension too large"))?);
            }
            let n = element_count(&shape)?;
            let payload_len = r.u64()?;
            let expected = n.checked_mul(dtype.size()).ok_or_else(|| format_err("tensor too large"))?;
            if payload_len != expected as u64 {
                return Err(format_err(format!(
                    "tensor {name:?}: payload of {payload_len} bytes, shape {shape:?} needs {expected}"
                )));
            }
            let payload = r.take(expected)?;
            let data = decode_payload(dtype, payload)?;
            let tensor = StoredTensor { dtype, shape, data };
            if tensors.insert(name.clone(), tensor).is_some() {
                return Err(format_err(format!("duplicate tensor {name:?}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(format_err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| format_err("section too large"))
}

fn element_count(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err(format!("shape {shape:?} overflows")))
}

fn valid_key(k: &str) -> bool {
    !k.is_empty() && k.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-'))
}

/// Serializes metadata as sorted `key = value` lines.
pub fn encode_metadata(meta: &BTreeMap<String, String>) -> Result<String> {
    let mut s = String::new();
    for (k, v) in meta {
        if !valid_key(k) {
            return Err(format_err(format!("invalid metadata key {k:?}")));
        }
        if v.contains('\n') || v.trim() != v {
            return Err(format_err(format!("metadata value for {k:?} has newlines or edge whitespace")));
        }
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(v);
        s.push('\n');
    }
    Ok(s)
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// keys must be unique.
pub fn parse_metadata(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(format_err(format!("metadata line {} has no '='", i + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if !valid_key(k) {
            return Err(format_err(format!("invalid metadata key {k:?} on line {}", i + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(format_err(format!("duplicate metadata key {k:?}")));
        }
    }
    Ok(out)
}

fn encode_payload(t: &StoredTensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(t.len() * t.dtype.size());
    match (&t.data, t.dtype) {
        (TensorData::Float(v), DType::F64) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        (TensorData::Float(v), DType::F32) => {
            v.iter().for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes()))
        }
        (TensorData::Int(v), dt) if !dt.is_float() => {
            let (lo, hi) = int_range(dt);
            for &x in v {
                if !(lo..=hi).contains(&x) {
                    return Err(format_err(format!("value {x} does not fit {dt:?}")));
                }
                let bytes = x.to_le_bytes();
                out.extend_from_slice(&bytes[..dt.size()]);
            }
        }
        _ => return Err(format_err("tensor data does not match its dtype")),
    }
    Ok(out)
}

fn decode_payload(dtype: DType, payload: &[u8]) -> Result<TensorData> {
    let chunks = payload.chunks_exact(dtype.size());
    Ok(match dtype {
        DType::F64 => TensorData::Float(
            chunks.map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect(),
        ),
        DType::F32 => TensorData::Float(
            chunks.map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64).collect(),
        ),
        DType::I8 => TensorData::Int(chunks.map(|c| c[0] as i8 as i64).collect()),
        DType::U8 => TensorData::Int(chunks.map(|c| c[0] as i64).collect()),
        DType::I16 => TensorData::Int(
            chunks.map(|c| i16::from_le_bytes(c.try_into().expect("2-byte chunk")) as i64).collect(),
        ),
        DType::I32 => TensorData::Int(
            chunks.map(|c| i32::from_le_bytes(c.try_into().expect("4-byte chunk")) as i64).collect(),
        ),
        DType::I64 => TensorData::Int(
            chunks.map(|c| i64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect(),
        ),
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            format_err(format!("truncated input: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
