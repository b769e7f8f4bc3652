//! Binary tensor file format.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! magic "SPLT" | version = 1 | ndim | dims[ndim] | dtype = 1 (f32) | payload
//! ```
//!
//! The payload is `product(dims)` IEEE-754 single-precision values, row-major
//! with the last index fastest. Values are rounded from `f64` on write.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SPLT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;

/// Serializes a tensor to the in-memory byte layout.
pub fn encode_tensor(dims: &[usize], values: &[f64]) -> Vec<u8> {
    assert!(!dims.is_empty(), "tensor must have at least one dimension");
    let count: usize = dims.iter().product();
    assert_eq!(
        count,
        values.len(),
        "dims {dims:?} do not match {} values",
        values.len()
    );
    let mut out = Vec::with_capacity(16 + 4 * dims.len() + 4 * count);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        let d = u32::try_from(d).expect("dimension exceeds u32");
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Parses the byte layout; `path` is only used in error messages.
pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut cursor = 0usize;
    let mut take_u32 = |field: &str| -> Result<u32> {
        let chunk = bytes
            .get(cursor..cursor + 4)
            .ok_or_else(|| Error::format(path, format!("truncated header at {field}")))?;
        cursor += 4;
        Ok(u32::from_le_bytes(chunk.try_into().unwrap()))
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    take_u32("magic")?;
    let version = take_u32("version")?;
    if version != VERSION {
        return Err(Error::format(path, format!("bad version {version}")));
    }
    let ndim = take_u32("ndim")? as usize;
    if ndim == 0 {
        return Err(Error::format(path, "bad ndim 0"));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(take_u32("dims")? as usize);
    }
    let dtype = take_u32("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::format(path, format!("bad dtype {dtype}")));
    }
    let header = 16 + 4 * ndim;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(path, "bad dims: element count overflows"))?;
    let payload = &bytes[header..];
    if payload.len() < count * 4 {
        return Err(Error::format(
            path,
            format!(
                "truncated payload: expected {} bytes, found {}",
                count * 4,
                payload.len()
            ),
        ));
    }
    if payload.len() > count * 4 {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((dims, values))
}

pub fn write_tensor(path: impl AsRef<Path>, dims: &[usize], values: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(dims, values);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<f64>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}
