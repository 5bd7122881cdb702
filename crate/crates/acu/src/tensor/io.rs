//! Binary tensor file format.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! offset  size  field
//! 0       8     magic  "ACUTNSR1"
//! 8       1     dtype  0 = f64, 1 = f32
//! 9       32    dims   n, c, h, w as u64
//! 41      ...   payload, n*c*h*w IEEE-754 values, row-major (n, c, h, w)
//! ```
//!
//! `f64` is the working precision; the `f32` payload exists for compact
//! exports and is widened on read. Writing `f32` narrows values and is
//! lossy for data that is not exactly representable in single precision.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const MAGIC: &[u8; 8] = b"ACUTNSR1";
const HEADER_LEN: usize = 8 + 1 + 4 * 8;

/// Element type of a tensor file payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }

    fn from_code(code: u8) -> Result<DType> {
        match code {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            other => Err(Error::Format(format!("unknown dtype byte {other}"))),
        }
    }
}

/// Writes a tensor with a full-precision `f64` payload.
pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor4) -> Result<()> {
    write_tensor_as(path, t, DType::F64)
}

/// Writes a tensor with the requested payload precision.
pub fn write_tensor_as(path: impl AsRef<Path>, t: &Tensor4, dtype: DType) -> Result<()> {
    let path = path.as_ref();
    let (n, c, h, w) = t.dims();
    let mut bytes = Vec::with_capacity(HEADER_LEN + t.numel() * dtype.width());
    bytes.extend_from_slice(MAGIC);
    bytes.push(dtype.code());
    for d in [n, c, h, w] {
        bytes.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        DType::F64 => {
            for v in t.as_slice() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        DType::F32 => {
            for v in t.as_slice() {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a tensor file, widening `f32` payloads to `f64`.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor4> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "file too short for header: {} bytes",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[..8],
            MAGIC
        )));
    }
    let dtype = DType::from_code(bytes[8])?;
    let mut dims = [0u64; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let at = 9 + 8 * i;
        *d = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
    }
    let count = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Overflow(format!("dims {dims:?}")))?;
    let payload_bytes = count
        .checked_mul(dtype.width() as u64)
        .ok_or_else(|| Error::Overflow(format!("dims {dims:?}")))?;
    if count > (usize::MAX as u64) || dims.iter().any(|&d| d == 0 || d > usize::MAX as u64) {
        return Err(Error::Overflow(format!("dims {dims:?}")));
    }
    let found = (bytes.len() - HEADER_LEN) as u64;
    if found != payload_bytes {
        return Err(Error::PayloadLength {
            expected: payload_bytes,
            found,
        });
    }
    let payload = &bytes[HEADER_LEN..];
    let data: Vec<f64> = match dtype {
        DType::F64 => payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
    };
    Tensor4::from_vec(
        dims[0] as usize,
        dims[1] as usize,
        dims[2] as usize,
        dims[3] as usize,
        data,
    )
}
