//! The DFLT tensor file format.
//!
//! Layout: magic `DFLT`, `u8` version (1), `u8` dtype (0 = f32, 1 = f64),
//! `u8` ndim, `ndim` little-endian `u32` extents, then the row-major payload
//! as little-endian IEEE-754 values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"DFLT";
pub const VERSION: u8 = 1;

pub fn encode<T: Element>(tensor: &Tensor<T>) -> Vec<u8> {
    let shape = tensor.shape();
    let mut out = Vec::with_capacity(7 + 4 * shape.len() + tensor.numel() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE as u8);
    out.push(u8::try_from(shape.len()).expect("at most 255 dimensions"));
    for &d in shape {
        out.extend_from_slice(&u32::try_from(d).expect("extent fits in u32").to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut out);
    }
    out
}

/// Reads only the header, returning dtype and shape.
pub fn decode_header(bytes: &[u8]) -> Result<(DType, Vec<usize>, usize)> {
    if bytes.len() < 7 || &bytes[..4] != MAGIC {
        return Err(Error::format("DFLT", "missing `DFLT` magic"));
    }
    if bytes[4] != VERSION {
        return Err(Error::format("DFLT", format!("unsupported version {}", bytes[4])));
    }
    let dtype = DType::from_code(bytes[5])
        .ok_or_else(|| Error::format("DFLT", format!("unknown dtype code {}", bytes[5])))?;
    let ndim = bytes[6] as usize;
    if ndim == 0 {
        return Err(Error::format("DFLT", "zero dimensions"));
    }
    let header_len = 7 + 4 * ndim;
    if bytes.len() < header_len {
        return Err(Error::format("DFLT", "truncated header"));
    }
    let shape: Vec<usize> = bytes[7..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    if shape.contains(&0) {
        return Err(Error::format("DFLT", format!("zero extent in {shape:?}")));
    }
    Ok((dtype, shape, header_len))
}

/// Decodes a DFLT buffer, converting the payload to `T` when the stored
/// dtype differs.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<Tensor<T>> {
    let (dtype, shape, header_len) = decode_header(bytes)?;
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format("DFLT", "extent product overflows"))?;
    let payload = &bytes[header_len..];
    if payload.len() != numel * dtype.size() {
        return Err(Error::format(
            "DFLT",
            format!(
                "payload holds {} bytes, shape {shape:?} needs {}",
                payload.len(),
                numel * dtype.size()
            ),
        ));
    }
    let data: Vec<T> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| T::from_f64(f64::read_le(c)))
            .collect(),
    };
    Tensor::new(shape, data)
}

pub fn save<T: Element>(path: impl AsRef<Path>, tensor: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(tensor)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Element>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
