//! VVOL: a minimal little-endian container for one 3D float grid.
//!
//! ```text
//! "VVOL" | u32 version = 1 | u32 ndim = 3 | u32 D | u32 H | u32 W | u32 dtype = 0 | f32 payload (W fastest)
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array3;

use super::PhaseVolume;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VVOL";
pub const VERSION: u32 = 1;
pub const DTYPE_F32_LE: u32 = 0;
pub const HEADER_LEN: usize = 4 + 4 * 6;

/// Encodes a grid as VVOL bytes.
pub fn encode_volume(voxels: &Array3<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + voxels.len() * 4);
    out.extend_from_slice(MAGIC);
    for v in [VERSION, 3] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &d in voxels.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&DTYPE_F32_LE.to_le_bytes());
    for v in voxels.as_standard_layout().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes VVOL bytes; `path` is only used for error messages.
pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<Array3<f32>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic { path: path.into() });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.into(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (version, ndim) = (word(0), word(1));
    let dims = [word(2) as usize, word(3) as usize, word(4) as usize];
    let dtype = word(5);
    let unsupported = |detail: String| Error::UnsupportedHeader {
        path: path.into(),
        detail,
    };
    if version != VERSION {
        return Err(unsupported(format!("version {version}")));
    }
    if ndim != 3 {
        return Err(unsupported(format!("ndim {ndim}")));
    }
    if dtype != DTYPE_F32_LE {
        return Err(unsupported(format!("dtype code {dtype}")));
    }
    if dims.contains(&0) {
        return Err(unsupported(format!("zero-sized dims {dims:?}")));
    }
    let expected = dims.iter().product::<usize>() * 4;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::PayloadMismatch {
            path: path.into(),
            dims,
            found: payload.len() - expected,
        });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Array3::from_shape_vec((dims[0], dims[1], dims[2]), values).expect("size checked"))
}

pub fn write_volume(path: impl AsRef<Path>, volume: &PhaseVolume) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_volume(&volume.voxels)).map_err(|e| Error::io(path, e))
}

/// Reads a VVOL file. The phase name defaults to the file stem.
pub fn read_volume(path: impl AsRef<Path>) -> Result<PhaseVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let voxels = decode_volume(&bytes, path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    PhaseVolume::new(voxels, name)
}
