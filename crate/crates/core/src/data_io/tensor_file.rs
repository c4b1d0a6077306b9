//! Binary tensor files.
//!
//! Layout (little-endian, no padding): 4 magic bytes, `u32` rank, `rank`
//! `u32` dimensions, then the row-major payload. `DKT1` carries `f32`
//! values; `DKT2` carries `f64` values and is what checkpoints use, so
//! parameters survive a save/load cycle bit for bit.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC_F32: &[u8; 4] = b"DKT1";
pub const MAGIC_F64: &[u8; 4] = b"DKT2";
pub const MAX_RANK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

pub fn encode(tensor: &Tensor, precision: Precision) -> Result<Vec<u8>> {
    if tensor.rank() > MAX_RANK {
        return Err(Error::dim(format!(
            "tensor files hold rank <= {MAX_RANK}, got rank {}",
            tensor.rank()
        )));
    }
    if !tensor.all_finite() {
        return Err(Error::Data("refusing to write non-finite values".into()));
    }
    let mut out =
        Vec::with_capacity(8 + 4 * tensor.rank() + precision.width() * tensor.numel());
    out.extend_from_slice(match precision {
        Precision::F32 => MAGIC_F32,
        Precision::F64 => MAGIC_F64,
    });
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match precision {
        Precision::F32 => {
            for &v in tensor.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Precision::F64 => {
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| format_err(offset, format!("truncated header: missing {what}")))
}

pub fn decode(bytes: &[u8]) -> Result<(Tensor, Precision)> {
    if bytes.len() < 4 {
        return Err(format_err(0, "missing magic"));
    }
    let precision = match &bytes[..4] {
        m if m == MAGIC_F32 => Precision::F32,
        m if m == MAGIC_F64 => Precision::F64,
        _ => return Err(format_err(0, "bad magic")),
    };
    let rank = read_u32(bytes, 4, "rank")? as usize;
    if rank > MAX_RANK {
        return Err(format_err(4, format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(read_u32(bytes, 8 + 4 * i, "dimension")? as usize);
    }
    let start = 8 + 4 * rank;
    let numel: usize = shape.iter().product();
    let width = precision.width();
    let expected = start + numel * width;
    if bytes.len() < expected {
        return Err(format_err(
            bytes.len(),
            format!("truncated payload: expected {expected} bytes"),
        ));
    }
    if bytes.len() > expected {
        return Err(format_err(expected, "trailing bytes after payload"));
    }
    let payload = &bytes[start..];
    let data = match precision {
        Precision::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Precision::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok((Tensor::new(shape, data)?, precision))
}

/// Writes an `f32` (`DKT1`) tensor file.
pub fn write_tensor_file(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(tensor, Precision::F32)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes an `f64` (`DKT2`) tensor file.
pub fn write_tensor_file_f64(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(tensor, Precision::F64)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads either precision.
pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map(|(t, _)| t)
}
