//! `CKAT` tensor files.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "CKAT" (43 4B 41 54)
//! 4       4           version, u32 = 1
//! 8       4           dtype, u32: 1 = f32, 2 = f64
//! 12      4           ndim, u32
//! 16      4·ndim      dims, u32 each
//! ...     ∏dims·size  payload, row-major
//! ```
//!
//! All integers and floats are little-endian. Files starting with the `.npy`
//! magic are accepted by [`read_tensor`] as well.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkit::Matrix;

pub const MAGIC: [u8; 4] = *b"CKAT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
}

impl Dtype {
    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            other => Err(Error::UnknownDtype(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// A dense row-major tensor of 32- or 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: TensorData,
}

fn check_len(dims: &[usize], len: usize) -> Result<()> {
    if dims.len() > u32::MAX as usize || dims.iter().any(|&d| d > u32::MAX as usize) {
        return Err(Error::invalid("tensor dimension does not fit in u32"));
    }
    let expected: usize = dims.iter().product();
    if expected != len {
        return Err(Error::invalid(format!(
            "dims {dims:?} need {expected} values, got {len}"
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_len(&dims, data.len())?;
        Ok(Self {
            dims,
            data: TensorData::F32(data),
        })
    }

    pub fn f64(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_len(&dims, data.len())?;
        Ok(Self {
            dims,
            data: TensorData::F64(data),
        })
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            data: TensorData::F64(m.data().to_vec()),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values widened to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    /// A 2-D tensor as a matrix.
    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.dims[..] {
            [r, c] => Matrix::new(r, c, self.to_f64()),
            _ => Err(Error::invalid(format!(
                "expected a 2-D tensor, got dims {:?}",
                self.dims
            ))),
        }
    }

    /// Slices of a 3-D tensor along its first axis, as matrices.
    pub fn to_matrices(&self) -> Result<Vec<Matrix>> {
        match self.dims[..] {
            [n, r, c] => {
                let all = self.to_f64();
                (0..n)
                    .map(|i| Matrix::new(r, c, all[i * r * c..(i + 1) * r * c].to_vec()))
                    .collect()
            }
            _ => Err(Error::invalid(format!(
                "expected a 3-D tensor, got dims {:?}",
                self.dims
            ))),
        }
    }
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * t.dims.len() + t.len() * t.dtype().size());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&t.dtype().code().to_le_bytes());
    out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match &t.data {
        TensorData::F32(v) => v
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::F64(v) => v
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32(&mut self, header_len: usize) -> Result<u32> {
        let end = self.pos + 4;
        let b = self
            .bytes
            .get(self.pos..end)
            .ok_or(Error::TruncatedPayload {
                expected: header_len.max(end),
                found: self.bytes.len(),
            })?;
        self.pos = end;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32(16)?;
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let dtype = Dtype::from_code(r.u32(16)?)?;
    let ndim = r.u32(16)? as usize;
    let header = 16 + 4 * ndim;
    let dims = (0..ndim)
        .map(|_| r.u32(header).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::invalid("tensor element count overflows"))?;
    let expected = count
        .checked_mul(dtype.size())
        .and_then(|p| p.checked_add(header))
        .ok_or_else(|| Error::invalid("tensor byte size overflows"))?;
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::invalid(format!(
            "{} trailing bytes after the payload",
            bytes.len() - expected
        )));
    }
    let payload = &bytes[header..];
    let data = match dtype {
        Dtype::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        Dtype::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect(),
        ),
    };
    Ok(Tensor { dims, data })
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

/// Reads a `CKAT` file, or a `.npy` file recognized by its magic bytes.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(super::npy::NPY_MAGIC) {
        super::npy::decode_npy(&bytes)
    } else {
        decode(&bytes)
    }
}
