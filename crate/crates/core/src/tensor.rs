//! Dense n-dimensional tensors and the `TNSR` file format.
//!
//! A [`Tensor`] is a row-major `f64` buffer plus a shape. It is the value
//! carrier for everything in this crate: images, latents, activations,
//! extracted features, and network weights. All core math is 64-bit;
//! files may store 32-bit payloads (promoted to `f64` on load).
//!
//! The `TNSR` format, byte for byte:
//!
//! ```text
//! magic  b"TNSR"
//! u8     version (= 1)
//! u8     dtype   (0 = f32, 1 = f64)
//! u32le  ndim
//! u32le  dims[ndim]
//! bytes  row-major little-endian payload
//! ```

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

/// Dense row-major tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from a shape and row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                context: "Tensor::new",
                expected: shape.clone(),
                actual: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// 1-D tensor from a slice.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor from nested rows; rows must be rectangular.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            shape: vec![r, c],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterpret the buffer under a new shape of equal volume.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::reshape",
                expected: shape,
                actual: self.shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], v: f64) {
        let off = self.offset(index);
        self.data[off] = v;
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape, "tensor add shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape, "tensor sub shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(self.len(), other.len(), "tensor dot length mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm_l1(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn norm_linf(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Write in `TNSR` format with an f64 payload.
    pub fn write_tnsr<W: Write>(&self, w: &mut W) -> Result<()> {
        self.write_tnsr_dtype(w, Dtype::F64)
    }

    /// Write in `TNSR` format with the given payload dtype.
    pub fn write_tnsr_dtype<W: Write>(&self, w: &mut W, dtype: Dtype) -> Result<()> {
        w.write_all(b"TNSR")?;
        w.write_all(&[1u8, dtype as u8])?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        match dtype {
            Dtype::F32 => {
                for &v in &self.data {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
            Dtype::F64 => {
                for &v in &self.data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    /// Read a `TNSR`-encoded tensor; f32 payloads are promoted to f64.
    pub fn read_tnsr<R: Read>(r: &mut R) -> Result<Self> {
        let mut head = [0u8; 6];
        read_exact_at(r, &mut head, 0)?;
        if &head[0..4] != b"TNSR" {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic, expected TNSR".into(),
            });
        }
        if head[4] != 1 {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported version {}", head[4]),
            });
        }
        let dtype = match head[5] {
            0 => Dtype::F32,
            1 => Dtype::F64,
            other => {
                return Err(Error::Format {
                    offset: 5,
                    message: format!("unknown dtype {other}"),
                })
            }
        };
        let mut b4 = [0u8; 4];
        read_exact_at(r, &mut b4, 6)?;
        let ndim = u32::from_le_bytes(b4) as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut offset = 10;
        for _ in 0..ndim {
            read_exact_at(r, &mut b4, offset)?;
            shape.push(u32::from_le_bytes(b4) as usize);
            offset += 4;
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        match dtype {
            Dtype::F32 => {
                for _ in 0..n {
                    read_exact_at(r, &mut b4, offset)?;
                    data.push(f32::from_le_bytes(b4) as f64);
                    offset += 4;
                }
            }
            Dtype::F64 => {
                let mut b8 = [0u8; 8];
                for _ in 0..n {
                    read_exact_at(r, &mut b8, offset)?;
                    data.push(f64::from_le_bytes(b8));
                    offset += 8;
                }
            }
        }
        Tensor::new(shape, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_tnsr(&mut f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_tnsr(&mut f)
    }
}

/// Payload element type of a `TNSR` file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: usize) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Format {
        offset,
        message: format!("truncated: {e}"),
    })
}
