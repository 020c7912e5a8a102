//! Binary feature (`PVF1`) and snippet-label (`PVL1`) files.
//!
//! Feature layout, all little-endian: magic `PVF1`, `u32` rows T, `u32`
//! columns D, then `T * D` IEEE-754 `f32` values in row-major order.
//! Label layout: magic `PVL1`, `u32` T, then T bytes each 0 or 1.

use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PVF_MAGIC: &[u8; 4] = b"PVF1";
pub const PVL_MAGIC: &[u8; 4] = b"PVL1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: Vec<u8>, expected: [u8; 4] },
    #[error("truncated: header promises {expected} bytes, file has {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("dimensions {rows}x{cols} overflow the addressable payload")]
    DimensionOverflow { rows: u64, cols: u64 },
    #[error("zero-sized dimension {rows}x{cols}")]
    EmptyDimension { rows: u64, cols: u64 },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(u64),
    #[error("value at index {0} is not finite")]
    NonFinite(usize),
    #[error("label byte {value} at snippet {index} is not 0 or 1")]
    InvalidLabel { index: usize, value: u8 },
    #[error("expected a rank-2 matrix, got shape {0:?}")]
    NotAMatrix(Vec<usize>),
}

fn check_magic(bytes: &[u8], expected: &[u8; 4]) -> Result<(), CodecError> {
    if bytes.len() < 4 || &bytes[..4] != expected {
        return Err(CodecError::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
            expected: *expected,
        });
    }
    Ok(())
}

fn need(bytes: &[u8], expected: u64) -> Result<(), CodecError> {
    if (bytes.len() as u64) < expected {
        return Err(CodecError::Truncated {
            expected,
            found: bytes.len() as u64,
        });
    }
    if (bytes.len() as u64) > expected {
        return Err(CodecError::TrailingBytes(bytes.len() as u64 - expected));
    }
    Ok(())
}

pub fn encode_pvf(matrix: &Tensor) -> Result<Vec<u8>, CodecError> {
    let (rows, cols) = matrix
        .dims2()
        .map_err(|_| CodecError::NotAMatrix(matrix.shape().to_vec()))?;
    let (r32, c32) = match (u32::try_from(rows), u32::try_from(cols)) {
        (Ok(r), Ok(c)) => (r, c),
        _ => {
            return Err(CodecError::DimensionOverflow {
                rows: rows as u64,
                cols: cols as u64,
            })
        }
    };
    if let Some(i) = matrix.data().iter().position(|v| !v.is_finite()) {
        return Err(CodecError::NonFinite(i));
    }
    let mut out = vec![0u8; 12 + rows * cols * 4];
    out[..4].copy_from_slice(PVF_MAGIC);
    LittleEndian::write_u32(&mut out[4..8], r32);
    LittleEndian::write_u32(&mut out[8..12], c32);
    for (chunk, &v) in out[12..].chunks_exact_mut(4).zip(matrix.data()) {
        LittleEndian::write_f32(chunk, v as f32);
    }
    Ok(out)
}

pub fn decode_pvf(bytes: &[u8]) -> Result<Tensor, CodecError> {
    check_magic(bytes, PVF_MAGIC)?;
    if bytes.len() < 12 {
        return Err(CodecError::Truncated {
            expected: 12,
            found: bytes.len() as u64,
        });
    }
    let rows = LittleEndian::read_u32(&bytes[4..8]) as u64;
    let cols = LittleEndian::read_u32(&bytes[8..12]) as u64;
    if rows == 0 || cols == 0 {
        return Err(CodecError::EmptyDimension { rows, cols });
    }
    let payload = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(12))
        .filter(|n| usize::try_from(*n).is_ok())
        .ok_or(CodecError::DimensionOverflow { rows, cols })?;
    need(bytes, payload)?;
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| LittleEndian::read_f32(c) as f64)
        .collect();
    Ok(Tensor::new(vec![rows as usize, cols as usize], data).expect("length checked"))
}

pub fn encode_pvl(labels: &[u8]) -> Result<Vec<u8>, CodecError> {
    if let Some((index, &value)) = labels.iter().enumerate().find(|(_, v)| **v > 1) {
        return Err(CodecError::InvalidLabel { index, value });
    }
    let t = u32::try_from(labels.len()).map_err(|_| CodecError::DimensionOverflow {
        rows: labels.len() as u64,
        cols: 1,
    })?;
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(PVL_MAGIC);
    let mut len = [0u8; 4];
    LittleEndian::write_u32(&mut len, t);
    out.extend_from_slice(&len);
    out.extend_from_slice(labels);
    Ok(out)
}

pub fn decode_pvl(bytes: &[u8]) -> Result<Vec<u8>, CodecError> {
    check_magic(bytes, PVL_MAGIC)?;
    if bytes.len() < 8 {
        return Err(CodecError::Truncated {
            expected: 8,
            found: bytes.len() as u64,
        });
    }
    let t = LittleEndian::read_u32(&bytes[4..8]) as u64;
    if t == 0 {
        return Err(CodecError::EmptyDimension { rows: t, cols: 1 });
    }
    need(bytes, 8 + t)?;
    let labels = bytes[8..].to_vec();
    if let Some((index, &value)) = labels.iter().enumerate().find(|(_, v)| **v > 1) {
        return Err(CodecError::InvalidLabel { index, value });
    }
    Ok(labels)
}

fn codec_err(path: &Path) -> impl FnOnce(CodecError) -> Error + '_ {
    move |source| Error::Codec {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_pvf(matrix: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode_pvf(matrix).map_err(codec_err(path))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pvf(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pvf(&bytes).map_err(codec_err(path))
}

pub fn write_pvl(labels: &[u8], path: &Path) -> Result<()> {
    let bytes = encode_pvl(labels).map_err(codec_err(path))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pvl(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pvl(&bytes).map_err(codec_err(path))
}
