//! Feature cache: `TSAF1`, kind byte, `T` and `L` as little-endian `u32`,
//! then `T·L` little-endian `f32` values in row-major order.

use std::fs;
use std::path::Path;

use super::{FeatureKind, FeatureMatrix};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CACHE_MAGIC: &[u8; 5] = b"TSAF1";

fn kind_code(kind: FeatureKind) -> u8 {
    match kind {
        FeatureKind::LogMel40 => 0,
        FeatureKind::Spec257 => 1,
    }
}

pub fn write_cache(path: &Path, f: &FeatureMatrix) -> Result<()> {
    let mut buf = Vec::with_capacity(14 + 4 * f.frames().numel());
    buf.extend_from_slice(CACHE_MAGIC);
    buf.push(kind_code(f.kind()));
    buf.extend_from_slice(&(f.num_frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(f.dim() as u32).to_le_bytes());
    for &v in f.frames().data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_cache(path: &Path) -> Result<FeatureMatrix> {
    let buf = fs::read(path)?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if buf.len() < 14 || &buf[..5] != CACHE_MAGIC {
        return Err(bad("not a feature cache"));
    }
    let kind = match buf[5] {
        0 => FeatureKind::LogMel40,
        1 => FeatureKind::Spec257,
        k => return Err(bad(&format!("unknown feature kind {k}"))),
    };
    let u32_at = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap()) as usize;
    let (t, l) = (u32_at(6), u32_at(10));
    if buf.len() != 14 + 4 * t * l {
        return Err(bad("truncated data"));
    }
    let data = buf[14..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    FeatureMatrix::new(Tensor::new(&[t, l], data)?, kind)
}
