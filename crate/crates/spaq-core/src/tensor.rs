//! Dense tensors in NCHW row-major layout.
//!
//! The dtype vocabulary is deliberately small: `f32` is the production
//! dtype, `f64` exists for gradient checking, `i8`/`i32` carry quantized
//! weights and biases. Arithmetic between floating tensors requires exactly
//! matching dtypes — there are no implicit promotions anywhere in the crate.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    I8,
    I32,
}

impl DType {
    pub fn byte_width(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 => 8,
            DType::I8 => 1,
        }
    }

    /// Stable on-disk code, used by the model file tensor table.
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::I8 => 1,
            DType::I32 => 2,
            DType::F64 => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => DType::F32,
            1 => DType::I8,
            2 => DType::I32,
            3 => DType::F64,
            other => return Err(Error::Corrupt(format!("unknown dtype code {other}"))),
        })
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DType::F32 => "fp32",
            DType::F64 => "fp64",
            DType::I8 => "int8",
            DType::I32 => "int32",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Storage {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I8(Vec<i8>),
    I32(Vec<i32>),
}

impl Storage {
    fn len(&self) -> usize {
        match self {
            Storage::F32(v) => v.len(),
            Storage::F64(v) => v.len(),
            Storage::I8(v) => v.len(),
            Storage::I32(v) => v.len(),
        }
    }
}

/// A dense tensor. Invariant: `data.len() == shape.iter().product()`,
/// enforced by every constructor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Storage,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Storage) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "payload has {} elements, shape {:?} wants {}",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, Storage::F32(data))
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, Storage::F64(data))
    }

    pub fn from_i8(shape: Vec<usize>, data: Vec<i8>) -> Result<Self> {
        Self::new(shape, Storage::I8(data))
    }

    pub fn from_i32(shape: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        Self::new(shape, Storage::I32(data))
    }

    pub fn zeros(dtype: DType, shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        let data = match dtype {
            DType::F32 => Storage::F32(vec![0.0; n]),
            DType::F64 => Storage::F64(vec![0.0; n]),
            DType::I8 => Storage::I8(vec![0; n]),
            DType::I32 => Storage::I32(vec![0; n]),
        };
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        match &self.data {
            Storage::F32(_) => DType::F32,
            Storage::F64(_) => DType::F64,
            Storage::I8(_) => DType::I8,
            Storage::I32(_) => DType::I32,
        }
    }

    pub fn storage(&self) -> &Storage {
        &self.data
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            Storage::F32(v) => Ok(v),
            other => Err(Error::DtypeMismatch(format!(
                "expected fp32, got {}",
                dtype_of(other)
            ))),
        }
    }

    pub fn as_f32_mut(&mut self) -> Result<&mut [f32]> {
        match &mut self.data {
            Storage::F32(v) => Ok(v),
            other => Err(Error::DtypeMismatch(format!(
                "expected fp32, got {}",
                dtype_of(other)
            ))),
        }
    }

    pub fn as_f64(&self) -> Result<&[f64]> {
        match &self.data {
            Storage::F64(v) => Ok(v),
            other => Err(Error::DtypeMismatch(format!(
                "expected fp64, got {}",
                dtype_of(other)
            ))),
        }
    }

    pub fn as_f64_mut(&mut self) -> Result<&mut [f64]> {
        match &mut self.data {
            Storage::F64(v) => Ok(v),
            other => Err(Error::DtypeMismatch(format!(
                "expected fp64, got {}",
                dtype_of(other)
            ))),
        }
    }

    pub fn as_i8(&self) -> Result<&[i8]> {
        match &self.data {
            Storage::I8(v) => Ok(v),
            other => Err(Error::DtypeMismatch(format!(
                "expected int8, got {}",
                dtype_of(other)
            ))),
        }
    }

    pub fn as_i32(&self) -> Result<&[i32]> {
        match &self.data {
            Storage::I32(v) => Ok(v),
            other => Err(Error::DtypeMismatch(format!(
                "expected int32, got {}",
                dtype_of(other)
            ))),
        }
    }

    /// Widen fp32 to fp64 (identity on fp64). Used by the gradient-check path.
    pub fn to_f64(&self) -> Result<Tensor> {
        match &self.data {
            Storage::F32(v) => Tensor::from_f64(
                self.shape.clone(),
                v.iter().map(|&x| f64::from(x)).collect(),
            ),
            Storage::F64(_) => Ok(self.clone()),
            other => Err(Error::DtypeMismatch(format!(
                "cannot widen {} to fp64",
                dtype_of(other)
            ))),
        }
    }

    /// Raw little-endian payload bytes, as persisted by the model file.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match &self.data {
            Storage::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Storage::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Storage::I8(v) => v.iter().map(|&x| x as u8).collect(),
            Storage::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    pub fn from_le_bytes(dtype: DType, shape: Vec<usize>, bytes: &[u8]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if bytes.len() != n * dtype.byte_width() {
            return Err(Error::Truncated(format!(
                "tensor payload: expected {} bytes, got {}",
                n * dtype.byte_width(),
                bytes.len()
            )));
        }
        let data = match dtype {
            DType::F32 => Storage::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DType::F64 => Storage::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::I8 => Storage::I8(bytes.iter().map(|&b| b as i8).collect()),
            DType::I32 => Storage::I32(
                bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
        };
        Tensor::new(shape, data)
    }
}

fn dtype_of(s: &Storage) -> DType {
    match s {
        Storage::F32(_) => DType::F32,
        Storage::F64(_) => DType::F64,
        Storage::I8(_) => DType::I8,
        Storage::I32(_) => DType::I32,
    }
}

/// Flat offset of `[n, c, h, w]` in an NCHW tensor of the given shape.
#[inline]
pub fn nchw_offset(shape: &[usize; 4], n: usize, c: usize, h: usize, w: usize) -> usize {
    ((n * shape[1] + c) * shape[2] + h) * shape[3] + w
}
