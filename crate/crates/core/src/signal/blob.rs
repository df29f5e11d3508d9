//! Binary tensor blobs.
//!
//! Layout: 16-byte magic block (`NFORGE01`, one dtype byte, seven zero
//! bytes), little-endian `u32` rank, `rank` little-endian `u64` dims, then
//! the row-major little-endian payload.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"NFORGE01";
const MAGIC_BLOCK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub fn encode(array: &ArrayD<f64>, dtype: DType) -> Vec<u8> {
    let shape = array.shape();
    let mut out = Vec::with_capacity(MAGIC_BLOCK + 4 + 8 * shape.len() + dtype.width() * array.len());
    out.extend_from_slice(MAGIC);
    out.push(dtype.code());
    out.extend_from_slice(&[0u8; MAGIC_BLOCK - 9]);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    // iter() walks in logical row-major order regardless of memory layout
    match dtype {
        DType::F64 => array
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DType::F32 => array
            .iter()
            .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
    }
    out
}

pub fn decode(bytes: &[u8], name: &str) -> Result<(ArrayD<f64>, DType)> {
    let corrupt = |reason: String| Error::CorruptBlob {
        path: name.to_string(),
        reason,
    };
    if bytes.len() < MAGIC_BLOCK + 4 {
        return Err(Error::Integrity {
            path: name.to_string(),
            expected: (MAGIC_BLOCK + 4) as u64,
            actual: bytes.len() as u64,
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let dtype = DType::from_code(bytes[8])
        .ok_or_else(|| corrupt(format!("unknown dtype code {}", bytes[8])))?;
    let rank = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let header = MAGIC_BLOCK + 4 + 8 * rank;
    if bytes.len() < header {
        return Err(Error::Integrity {
            path: name.to_string(),
            expected: header as u64,
            actual: bytes.len() as u64,
        });
    }
    let mut dims = Vec::with_capacity(rank);
    for k in 0..rank {
        let o = 20 + 8 * k;
        dims.push(u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()));
    }
    let count = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| corrupt("dimension product overflows".into()))?;
    let expected = (header as u64).checked_add(count.saturating_mul(dtype.width() as u64));
    let expected = expected.ok_or_else(|| corrupt("payload size overflows".into()))?;
    if bytes.len() as u64 != expected {
        return Err(Error::Integrity {
            path: name.to_string(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let payload = &bytes[header..];
    let values: Vec<f64> = match dtype {
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    let dims: Vec<usize> = dims.into_iter().map(|d| d as usize).collect();
    let array = ArrayD::from_shape_vec(IxDyn(&dims), values)
        .map_err(|e| corrupt(format!("shape error: {e}")))?;
    Ok((array, dtype))
}

pub fn write_blob(path: &Path, array: &ArrayD<f64>, dtype: DType) -> Result<()> {
    std::fs::write(path, encode(array, dtype)).map_err(|e| Error::io(path, e))
}

pub fn read_blob(path: &Path) -> Result<(ArrayD<f64>, DType)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned());
    decode(&bytes, &name.unwrap_or_else(|| path.display().to_string()))
}
