//! Versioned binary container for named tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "IMTN"  u32 version  u32 entry_count
//! per entry:
//!   u32 name_len  name (UTF-8)  u8 dtype (0 = f32, 1 = f64)
//!   u32 rank  u64 extent * rank  payload (IEEE-754 LE)
//! ```
//!
//! Readers decode the whole file before returning anything, so a truncated
//! or corrupt file never yields a partial result.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"IMTN";
pub const VERSION: u32 = 1;

/// A tensor of either precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to `T`, casting if the stored precision differs.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode<'a>(entries: impl IntoIterator<Item = (&'a str, &'a AnyTensor)>) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, entries.len() as u32);
    for (name, t) in entries {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        out.push(t.dtype().tag());
        match t {
            AnyTensor::F32(t) => put_tensor(&mut out, t),
            AnyTensor::F64(t) => put_tensor(&mut out, t),
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format { offset: self.pos as u64, message: message.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(format!(
                "unexpected end of data reading {what} ({n} bytes needed, {} left)",
                self.buf.len() - self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn tensor<T: Scalar>(&mut self, shape: Vec<usize>) -> Result<Tensor<T>> {
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = numel
            .and_then(|n| n.checked_mul(T::DTYPE.size_of()))
            .ok_or_else(|| self.fail(format!("shape {shape:?} overflows")))?;
        let raw = self.take(bytes, "tensor payload")?;
        let data = raw.chunks_exact(T::DTYPE.size_of()).map(T::read_le).collect();
        Tensor::new(shape, data).map_err(|e| self.fail(e.to_string()))
    }
}

/// Decodes a whole container, preserving entry order.
pub fn decode(buf: &[u8]) -> Result<Vec<(String, AnyTensor)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic, expected \"IMTN\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let count = r.u32("entry count")?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name_start = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format { offset: name_start as u64, message: "name is not UTF-8".into() })?
            .to_string();
        let tag = r.take(1, "dtype tag")?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| {
            r.pos -= 1;
            r.fail(format!("unknown dtype tag {tag}"))
        })?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            let d = r.u64("extent")?;
            shape.push(usize::try_from(d).map_err(|_| r.fail(format!("extent {d} too large")))?);
        }
        let t = match dtype {
            DType::F32 => AnyTensor::F32(r.tensor(shape)?),
            DType::F64 => AnyTensor::F64(r.tensor(shape)?),
        };
        entries.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(r.fail(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(entries)
}

pub fn save<'a>(path: &Path, entries: impl IntoIterator<Item = (&'a str, &'a AnyTensor)>) -> Result<()> {
    fs::write(path, encode(entries))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, AnyTensor)>> {
    decode(&fs::read(path)?)
}
