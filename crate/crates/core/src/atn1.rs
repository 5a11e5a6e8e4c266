//! ATN1 binary tensor format.
//!
//! Layout (little-endian):
//! - magic: `b"ATN1"`
//! - ndim: u8
//! - extents: ndim * u32
//! - data: product(extents) * f32, row-major

use std::fs;
use std::path::Path;

use crate::error::{GiftError, Result};
use crate::tensors::DenseTensor;

pub const MAGIC: &[u8; 4] = b"ATN1";

fn malformed(offset: usize, reason: impl Into<String>) -> GiftError {
    GiftError::Atn1 { offset, reason: reason.into() }
}

pub fn encode(tensor: &DenseTensor) -> Result<Vec<u8>> {
    let dims = tensor.dims();
    let ndim = u8::try_from(dims.len())
        .map_err(|_| GiftError::Shape(format!("ATN1 holds at most 255 dims, got {}", dims.len())))?;
    let mut out = Vec::with_capacity(5 + 4 * dims.len() + 4 * tensor.numel());
    out.extend_from_slice(MAGIC);
    out.push(ndim);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| GiftError::Shape(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<DenseTensor> {
    if bytes.len() < MAGIC.len() {
        return Err(malformed(bytes.len(), "truncated magic"));
    }
    if &bytes[..4] != MAGIC {
        return Err(malformed(0, format!("bad magic {:?}", &bytes[..4])));
    }
    let mut pos = 4;
    let ndim = *bytes.get(pos).ok_or_else(|| malformed(pos, "truncated before ndim"))? as usize;
    pos += 1;
    if ndim == 0 {
        return Err(malformed(4, "ndim must be positive"));
    }

    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let chunk = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| malformed(pos, "truncated extent"))?;
        let d = u32::from_le_bytes(chunk.try_into().expect("4-byte slice")) as usize;
        if d == 0 {
            return Err(malformed(pos, "zero extent"));
        }
        dims.push(d);
        pos += 4;
    }

    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| malformed(5, "extent product overflows"))?;
    let needed = numel
        .checked_mul(4)
        .ok_or_else(|| malformed(5, "payload size overflows"))?;
    let payload = &bytes[pos..];
    if payload.len() < needed {
        // name the first byte that is missing
        let offset = pos + payload.len() - payload.len() % 4;
        return Err(malformed(
            offset,
            format!("truncated payload: expected {needed} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > needed {
        return Err(malformed(pos + needed, "trailing bytes after payload"));
    }

    let mut data = Vec::with_capacity(numel);
    for (i, c) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if !v.is_finite() {
            return Err(malformed(pos + 4 * i, "non-finite value"));
        }
        data.push(v);
    }
    DenseTensor::new(dims, data)
}

pub fn write_file(path: impl AsRef<Path>, tensor: &DenseTensor) -> Result<()> {
    fs::write(path, encode(tensor)?)?;
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<DenseTensor> {
    decode(&fs::read(path)?)
}
