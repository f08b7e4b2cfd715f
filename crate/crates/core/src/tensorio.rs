//! Binary tensor files.
//!
//! Layout: magic `TIDE`, version byte (1), dtype byte, rank byte, `rank`
//! little-endian u32 dimensions, then the row-major little-endian payload.
//! Dtypes: 0 = f32, 1 = u8, 2 = f64 (used by checkpoints).

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, IxDyn};

use crate::error::{Result, TideError};
use crate::tape::Mat;

pub const MAGIC: &[u8; 4] = b"TIDE";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F32(ArrayD<f32>),
    U8(ArrayD<u8>),
    F64(ArrayD<f64>),
}

impl Tensor {
    fn dtype(&self) -> u8 {
        match self {
            Tensor::F32(_) => 0,
            Tensor::U8(_) => 1,
            Tensor::F64(_) => 2,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::F32(a) => a.shape(),
            Tensor::U8(a) => a.shape(),
            Tensor::F64(a) => a.shape(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let shape = self.shape();
        let mut out = Vec::with_capacity(7 + 4 * shape.len() + 8 * shape.iter().product::<usize>());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.dtype());
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match self {
            Tensor::F32(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Tensor::U8(a) => out.extend(a.iter().copied()),
            Tensor::F64(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| TideError::format("tensor file", d);
        if bytes.len() < 7 || &bytes[..4] != MAGIC {
            return Err(bad("missing TIDE magic"));
        }
        if bytes[4] != VERSION {
            return Err(bad(&format!("unsupported version {}", bytes[4])));
        }
        let dtype = bytes[5];
        let rank = bytes[6] as usize;
        let header = 7 + 4 * rank;
        if bytes.len() < header {
            return Err(bad("truncated header"));
        }
        let dims: Vec<usize> = (0..rank)
            .map(|i| u32::from_le_bytes(bytes[7 + 4 * i..11 + 4 * i].try_into().unwrap()) as usize)
            .collect();
        let count: usize = dims.iter().product();
        let payload = &bytes[header..];
        let width = match dtype {
            0 => 4,
            1 => 1,
            2 => 8,
            other => return Err(bad(&format!("unknown dtype {other}"))),
        };
        if payload.len() != count * width {
            return Err(bad(&format!("payload has {} bytes, expected {}", payload.len(), count * width)));
        }
        let shape = IxDyn(&dims);
        let t = match dtype {
            0 => Tensor::F32(
                ArrayD::from_shape_vec(
                    shape,
                    payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                )
                .map_err(|e| bad(&e.to_string()))?,
            ),
            1 => Tensor::U8(ArrayD::from_shape_vec(shape, payload.to_vec()).map_err(|e| bad(&e.to_string()))?),
            _ => Tensor::F64(
                ArrayD::from_shape_vec(
                    shape,
                    payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                )
                .map_err(|e| bad(&e.to_string()))?,
            ),
        };
        Ok(t)
    }

    pub fn into_f32_3(self) -> Result<Array3<f32>> {
        match self {
            Tensor::F32(a) => a.into_dimensionality().map_err(|e| TideError::format("tensor file", e.to_string())),
            _ => Err(TideError::format("tensor file", "expected f32 payload")),
        }
    }

    pub fn into_f32_2(self) -> Result<Array2<f32>> {
        match self {
            Tensor::F32(a) => a.into_dimensionality().map_err(|e| TideError::format("tensor file", e.to_string())),
            _ => Err(TideError::format("tensor file", "expected f32 payload")),
        }
    }

    pub fn into_u8_2(self) -> Result<Array2<u8>> {
        match self {
            Tensor::U8(a) => a.into_dimensionality().map_err(|e| TideError::format("tensor file", e.to_string())),
            _ => Err(TideError::format("tensor file", "expected u8 payload")),
        }
    }

    pub fn into_mat(self) -> Result<Mat> {
        match self {
            Tensor::F64(a) => a.into_dimensionality().map_err(|e| TideError::format("tensor file", e.to_string())),
            _ => Err(TideError::format("tensor file", "expected f64 payload")),
        }
    }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| TideError::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(TideError::Missing(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| TideError::io(path, e))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_bytes(path, &t.to_bytes())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    Tensor::from_bytes(&read_bytes(path)?)
}
