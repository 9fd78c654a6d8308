//! MCRT tensor dumps.
//!
//! Layout, all little-endian:
//!
//! ```text
//! 0..4   magic "MCRT"
//! 4      version (1)
//! 5      rank (1..=255)
//! 6..8   reserved, zero
//! 8..    rank x u32 extents
//! ..     product(extents) x f32, row-major
//! ```

use std::fs;
use std::path::Path;

use super::{io_err, HeatmapError};
use crate::tensor::Tensor;

pub const DUMP_MAGIC: &[u8; 4] = b"MCRT";
pub const DUMP_VERSION: u8 = 1;

fn format_err<T>(msg: impl Into<String>) -> Result<T, HeatmapError> {
    Err(HeatmapError::Format(msg.into()))
}

pub fn encode_tensor_dump(t: &Tensor) -> Result<Vec<u8>, HeatmapError> {
    let rank = t.rank();
    if rank == 0 || rank > u8::MAX as usize {
        return format_err(format!("rank {rank} cannot be dumped"));
    }
    let mut out = Vec::with_capacity(8 + 4 * rank + 4 * t.len());
    out.extend_from_slice(DUMP_MAGIC);
    out.push(DUMP_VERSION);
    out.push(rank as u8);
    out.extend_from_slice(&[0, 0]);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| HeatmapError::Format(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor_dump(bytes: &[u8]) -> Result<Tensor, HeatmapError> {
    if bytes.len() < 8 {
        return format_err(format!("{} bytes is shorter than the header", bytes.len()));
    }
    if &bytes[..4] != DUMP_MAGIC {
        return format_err(format!("bad magic {:?}", &bytes[..4]));
    }
    if bytes[4] != DUMP_VERSION {
        return format_err(format!("unsupported version {}", bytes[4]));
    }
    let rank = bytes[5] as usize;
    if rank == 0 {
        return format_err("rank 0 is not allowed");
    }
    if bytes[6..8] != [0, 0] {
        return format_err("reserved header bytes are not zero");
    }
    let dims_end = 8 + 4 * rank;
    if bytes.len() < dims_end {
        return format_err("truncated extents");
    }
    let shape: Vec<usize> = bytes[8..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| HeatmapError::Format("element count overflows".into()))?;
    let expected = n
        .checked_mul(4)
        .and_then(|b| b.checked_add(dims_end))
        .ok_or_else(|| HeatmapError::Format("element count overflows".into()))?;
    if bytes.len() != expected {
        return format_err(format!(
            "shape {shape:?} needs {expected} bytes, file has {}",
            bytes.len()
        ));
    }
    let data = bytes[dims_end..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data).map_err(|e| HeatmapError::Format(e.to_string()))
}

pub fn write_tensor_dump(t: &Tensor, path: impl AsRef<Path>) -> Result<(), HeatmapError> {
    let path = path.as_ref();
    fs::write(path, encode_tensor_dump(t)?).map_err(io_err(path))
}

pub fn read_tensor_dump(path: impl AsRef<Path>) -> Result<Tensor, HeatmapError> {
    let path = path.as_ref();
    decode_tensor_dump(&fs::read(path).map_err(io_err(path))?)
}
