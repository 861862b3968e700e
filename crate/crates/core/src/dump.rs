//! On-disk formats.
//!
//! `ASIT` tensor dump layout, all integers little-endian:
//!
//! | bytes        | content                                  |
//! |--------------|------------------------------------------|
//! | 4            | magic `b"ASIT"`                          |
//! | 1            | version, always `1`                      |
//! | 1            | rank `r`                                 |
//! | 4 * r        | `u32` dimensions, outermost first        |
//! | 4 * prod(dims) | row-major IEEE-754 `f32` values        |
//!
//! Feature maps and masks are rank 3 `(heads, positions, head_dim)`,
//! matrices rank 2 `(rows, cols)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{AsiError, Result};

pub const MAGIC: &[u8; 4] = b"ASIT";
pub const VERSION: u8 = 1;

/// A decoded dump.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode(dims: &[usize], values: &[f64]) -> Result<Vec<u8>> {
    let count: usize = dims.iter().product();
    if count != values.len() {
        return Err(AsiError::shape("dump::encode", format!("{dims:?}"), values.len()));
    }
    let rank = u8::try_from(dims.len())
        .map_err(|_| AsiError::Format(format!("rank {} exceeds 255", dims.len())))?;
    let mut out = Vec::with_capacity(6 + 4 * dims.len() + 4 * values.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(rank);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| AsiError::Format(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let header = bytes
        .get(..6)
        .ok_or_else(|| AsiError::Format("truncated header".into()))?;
    if &header[..4] != MAGIC {
        return Err(AsiError::Format("bad magic".into()));
    }
    if header[4] != VERSION {
        return Err(AsiError::Format(format!("unsupported version {}", header[4])));
    }
    let rank = header[5] as usize;
    let mut pos = 6;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let raw = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| AsiError::Format("truncated dimensions".into()))?;
        dims.push(u32::from_le_bytes(raw.try_into().unwrap()) as usize);
        pos += 4;
    }
    let count: usize = dims.iter().product();
    let body = &bytes[pos..];
    if body.len() != count * 4 {
        return Err(AsiError::Format(format!(
            "expected {} payload bytes, found {}",
            count * 4,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor { dims, data })
}

pub fn write_tensor(path: &Path, dims: &[usize], values: &[f64]) -> Result<()> {
    write_bytes(path, &encode(dims, values)?)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| AsiError::io(path, e))?;
    decode(&bytes)
}

/// Binary PGM (`P5`, maxval 255) of a `height x width` {0,1} mask;
/// 0 renders black, 1 renders white.
pub fn encode_pgm(width: usize, height: usize, bits: &[bool]) -> Vec<u8> {
    assert_eq!(bits.len(), width * height, "pgm size mismatch");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(bits.iter().map(|&b| if b { 255u8 } else { 0u8 }));
    out
}

/// Creates or truncates `path`; outputs never append.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| AsiError::io(path, e))?;
    f.write_all(bytes).map_err(|e| AsiError::io(path, e))
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| AsiError::io(path, e))
}
