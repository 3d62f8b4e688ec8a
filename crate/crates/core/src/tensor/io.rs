//! "T4F1" tensor dumps: the magic `T4F1`, four little-endian `u32` dims
//! `(n, c, h, w)`, then `n·c·h·w` little-endian `f32` samples.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Scalar, Shape4, Tensor4};
use crate::error::{Error, Result};

pub const T4F1_MAGIC: &[u8; 4] = b"T4F1";

pub fn write_t4f1_to<T: Scalar, W: Write>(out: &mut W, t: &Tensor4<T>) -> Result<()> {
    let s = t.shape();
    let mut buf = Vec::with_capacity(20 + 4 * t.len());
    buf.extend_from_slice(T4F1_MAGIC);
    for d in s.dims() {
        let d = u32::try_from(d).map_err(|_| Error::Unsupported {
            format: "T4F1",
            detail: format!("dimension {d} exceeds u32"),
        })?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Reads one tensor from a byte slice, returning it and the number of bytes consumed.
pub fn read_t4f1_from<T: Scalar>(bytes: &[u8], base_offset: usize) -> Result<(Tensor4<T>, usize)> {
    if bytes.len() < 20 {
        return Err(Error::format("T4F1", base_offset + bytes.len(), "truncated header"));
    }
    if &bytes[..4] != T4F1_MAGIC {
        return Err(Error::format("T4F1", base_offset, "bad magic"));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let off = 4 + 4 * i;
        *d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    }
    let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
    let (numel, need) = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| Some((n, n.checked_mul(4)?.checked_add(20)?)))
        .ok_or_else(|| Error::format("T4F1", base_offset + 4, format!("shape {shape} is too large")))?;
    if bytes.len() < need {
        return Err(Error::format(
            "T4F1",
            base_offset + bytes.len(),
            format!("truncated payload: need {need} bytes for {shape}"),
        ));
    }
    let mut data = Vec::with_capacity(numel);
    let mut payload = &bytes[20..need];
    let mut word = [0u8; 4];
    while !payload.is_empty() {
        payload.read_exact(&mut word)?;
        data.push(T::from_f64(f32::from_le_bytes(word) as f64));
    }
    let t = Tensor4::from_vec(shape, data).map_err(|e| Error::format("T4F1", base_offset + 4, e.to_string()))?;
    Ok((t, need))
}

pub fn write_t4f1<T: Scalar>(path: impl AsRef<Path>, t: &Tensor4<T>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_t4f1_to(&mut buf, t)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_t4f1<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor4<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = read_t4f1_from(&bytes, 0)?;
    if used != bytes.len() {
        return Err(Error::format("T4F1", used, "trailing bytes after tensor"));
    }
    Ok(t)
}
