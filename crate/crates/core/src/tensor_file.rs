//! Binary tensor container used for checkpoints and fixtures.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "VWCT" | version: u32 | count: u32
//! per tensor: name_len: u16 | name (UTF-8) | rank: u8 | dims: u32 × rank | dtype: u8 | values
//! ```
//!
//! `dtype` is 0 for f32 and 1 for f64; values are packed in row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VWCT";
pub const VERSION: u32 = 1;

/// A decoded tensor, kept in its on-disk precision.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    values: Vec<f64>,
}

impl StoredTensor {
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        StoredTensor {
            name: name.into(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE,
            values: t.data().iter().map(|v| v.f64()).collect(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::new(self.shape.clone(), self.values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn encode(tensors: &[StoredTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {}", t.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        let rank = u8::try_from(t.shape.len()).map_err(|_| Error::Format("rank above 255".into()))?;
        out.push(rank);
        for &d in &t.shape {
            let d = u32::try_from(d).map_err(|_| Error::Format("dimension above u32".into()))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(t.dtype.tag());
        match t.dtype {
            DType::F32 => t.values.iter().for_each(|&v| (v as f32).write_le(&mut out)),
            DType::F64 => t.values.iter().for_each(|&v| v.write_le(&mut out)),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated tensor file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
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
}

pub fn decode(buf: &[u8]) -> Result<Vec<StoredTensor>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let dtype = DType::from_tag(r.u8()?).ok_or_else(|| Error::Format("unknown dtype tag".into()))?;
        let n: usize = shape.iter().product();
        let bytes = r.take(n * dtype.size())?;
        let values = match dtype {
            DType::F32 => bytes.chunks(4).map(|b| f32::read_le(b) as f64).collect(),
            DType::F64 => bytes.chunks(8).map(f64::read_le).collect(),
        };
        out.push(StoredTensor { name, shape, dtype, values });
    }
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

/// Writes atomically through a temporary sibling file.
pub fn save(path: &Path, tensors: &[StoredTensor]) -> Result<()> {
    let bytes = encode(tensors)?;
    write_atomic(path, &bytes)
}

pub fn load(path: &Path) -> Result<Vec<StoredTensor>> {
    decode(&fs::read(path)?)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
