//! Header + payload file convention shared by volumes, label maps, the
//! retrieval index and network checkpoints.
//!
//! A file is one line of JSON (the header) terminated by `\n`, followed by
//! the raw little-endian payload. The header always carries `shape`,
//! `dtype` and `byte_order`; volume files add `spacing_mm`, and other
//! writers may add free-form keys under `meta`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U8,
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub const LITTLE_ENDIAN: &str = "little";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing_mm: Option<Vec<f64>>,
    pub dtype: DType,
    pub byte_order: String,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub meta: Map<String, Value>,
}

impl RawHeader {
    pub fn new(shape: &[usize], dtype: DType) -> Self {
        RawHeader {
            shape: shape.to_vec(),
            spacing_mm: None,
            dtype,
            byte_order: LITTLE_ENDIAN.to_string(),
            meta: Map::new(),
        }
    }

    pub fn num_elements(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Scalars storable in a raw payload.
pub trait RawScalar: Copy {
    const DTYPE: DType;
    fn put(self, out: &mut Vec<u8>);
    fn get(bytes: &[u8]) -> Self;
}

impl RawScalar for u8 {
    const DTYPE: DType = DType::U8;
    fn put(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn get(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

impl RawScalar for f32 {
    const DTYPE: DType = DType::F32;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl RawScalar for f64 {
    const DTYPE: DType = DType::F64;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Writes `header` and `data`. The header's dtype is overwritten with `T`'s.
pub fn write_raw<T: RawScalar>(path: &Path, header: &RawHeader, data: &[T]) -> Result<()> {
    let mut header = header.clone();
    header.dtype = T::DTYPE;
    if header.num_elements() != data.len() {
        return Err(Error::format(
            path,
            format!(
                "payload has {} elements but shape {:?} needs {}",
                data.len(),
                header.shape,
                header.num_elements()
            ),
        ));
    }
    let mut out = serde_json::to_vec(&header).map_err(|e| Error::format(path, e.to_string()))?;
    out.push(b'\n');
    out.reserve(data.len() * T::DTYPE.size());
    for &v in data {
        v.put(&mut out);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_header(path: &Path) -> Result<(RawHeader, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing header line"))?;
    let header: RawHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    if header.byte_order != LITTLE_ENDIAN {
        return Err(Error::format(path, format!("unsupported byte order {:?}", header.byte_order)));
    }
    let payload = bytes[nl + 1..].to_vec();
    let want = header.num_elements() * header.dtype.size();
    if payload.len() != want {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, header implies {want}", payload.len()),
        ));
    }
    Ok((header, payload))
}

pub fn read_raw<T: RawScalar>(path: &Path) -> Result<(RawHeader, Vec<T>)> {
    let (header, payload) = read_header(path)?;
    if header.dtype != T::DTYPE {
        return Err(Error::format(
            path,
            format!("expected dtype {:?}, found {:?}", T::DTYPE, header.dtype),
        ));
    }
    let size = T::DTYPE.size();
    let data = payload.chunks_exact(size).map(T::get).collect();
    Ok((header, data))
}
