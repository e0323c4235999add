//! The `CALMTNSR` v1 binary tensor format.
//!
//! Layout: 8-byte magic `CALMTNSR`, `u8` version (1), `u8` rank, six zero
//! bytes, `rank` little-endian `u32` extents, then the row-major payload as
//! little-endian `f32`. Loading widens to `f64`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Tensor, MAX_RANK};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CALMTNSR";
pub const VERSION: u8 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 4 * t.rank() + 4 * t.len());
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(t.rank() as u8);
    buf.extend_from_slice(&[0u8; 6]);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

pub fn decode(mut bytes: &[u8]) -> Result<Tensor> {
    let mut header = [0u8; 16];
    bytes
        .read_exact(&mut header)
        .map_err(|_| Error::Format("truncated header".into()))?;
    if &header[..8] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if header[8] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", header[8])));
    }
    let rank = header[9] as usize;
    if rank > MAX_RANK {
        return Err(Error::Format(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    if header[10..16].iter().any(|&b| b != 0) {
        return Err(Error::Format("reserved bytes must be zero".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 4];
        bytes
            .read_exact(&mut d)
            .map_err(|_| Error::Format("truncated dims".into()))?;
        shape.push(u32::from_le_bytes(d) as usize);
    }
    let n: usize = shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(Error::Format(format!(
            "payload holds {} bytes, shape {shape:?} needs {}",
            bytes.len(),
            4 * n
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(&shape, data)
}

pub fn write(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&fs::read(path)?)
}

/// Rounds every value to the nearest `f32`, the precision the file keeps.
pub fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}
