//! `HXT1` raw tensor files: 4-byte magic, u8 dtype, u8 rank, two zero bytes,
//! `rank` little-endian u32 dims, then the little-endian payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HXT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

pub fn encode(t: &Tensor, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + t.numel() * dtype.size());
    out.extend_from_slice(MAGIC);
    out.push(dtype as u8);
    out.push(t.rank() as u8);
    out.extend_from_slice(&[0, 0]);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match dtype {
        Dtype::F32 => t.data().iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        Dtype::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

/// Decodes a file image; f32 payloads are widened to f64.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    decode_with_dtype(bytes).map(|(t, _)| t)
}

pub fn decode_with_dtype(bytes: &[u8]) -> Result<(Tensor, Dtype)> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad raw tensor magic".into()));
    }
    let dtype = match bytes[4] {
        1 => Dtype::F32,
        2 => Dtype::F64,
        d => return Err(Error::Format(format!("unknown raw tensor dtype code {d}"))),
    };
    let rank = bytes[5] as usize;
    if rank == 0 {
        return Err(Error::Format("raw tensor of rank 0".into()));
    }
    let dims_end = 8 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(Error::Format("truncated raw tensor header".into()));
    }
    let shape: Vec<usize> = bytes[8..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let payload = &bytes[dims_end..];
    if payload.len() != n * dtype.size() {
        return Err(Error::Format(format!(
            "raw tensor payload is {} bytes, header {:?} needs {}",
            payload.len(),
            shape,
            n * dtype.size()
        )));
    }
    let data: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Tensor::new(&shape, data)
        .map(|t| (t, dtype))
        .map_err(|e| Error::Format(e.to_string()))
}

pub fn read_raw_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Writes a 64-bit file, so reading it back is bit-exact.
pub fn write_raw_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_raw_tensor_as(path, t, Dtype::F64)
}

pub fn write_raw_tensor_as(path: impl AsRef<Path>, t: &Tensor, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t, dtype)).map_err(|e| Error::io(path, e))
}
