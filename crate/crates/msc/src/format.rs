//! Binary volume files.
//!
//! Layout, little-endian: magic `MSCV`, `u32` version, three `u32` dims
//! (z, y, x), then `z·y·x` `f32` values in C order.

use std::fs;
use std::path::Path;

use msc_core::Volume;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MSCV";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

pub fn encode_volume(vol: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * vol.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in vol.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &vol.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<Volume> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "missing MSCV header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let dims = [word(8) as usize, word(12) as usize, word(16) as usize];
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::format(path, "dims overflow"))?;
    if bytes.len() != HEADER_LEN + 4 * n {
        return Err(Error::format(path, format!("payload holds {} bytes, dims {dims:?} need {}", bytes.len() - HEADER_LEN, 4 * n)));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Volume::from_vec(dims, data)?)
}

pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    fs::write(path, encode_volume(vol)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes, path)
}
