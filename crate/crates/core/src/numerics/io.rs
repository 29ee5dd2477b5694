//! "CMPT" binary tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes   b"CMPT"
//! version u32       1
//! dtype   u8        0 = f32, 1 = f64
//! rank    u32
//! shape   rank × u64
//! payload numel × dtype, row-major
//! ```

use std::fs;
use std::path::Path;

use super::scalar::{DType, Scalar};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CMPT";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + 8 * t.rank() + t.numel() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(T::DTYPE.tag());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.to_le_bytes_into(&mut out);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_inner<T: Scalar>(bytes: &[u8]) -> std::result::Result<Tensor<T>, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let tag = r.take(1)?[0];
    let dtype = DType::from_tag(tag).ok_or_else(|| format!("unknown dtype tag {tag}"))?;
    let rank = r.u32()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u64()? as usize);
    }
    let numel: usize = shape.iter().product();
    let payload = r.take(numel * dtype.size())?;
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    let data: Vec<T> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_slice(c) as f64))
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::from_le_slice(c)))
            .collect(),
    };
    Tensor::new(&shape, data).map_err(|e| e.to_string())
}

/// Decodes a tensor, converting the stored precision to `T` if needed.
pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    decode_inner(bytes).map_err(|msg| Error::Format {
        path: "<memory>".into(),
        msg,
    })
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_inner(&bytes).map_err(|msg| Error::Format {
        path: path.to_path_buf(),
        msg,
    })
}
