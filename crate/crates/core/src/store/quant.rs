//! Per-dimension affine 8-bit quantization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub const LEVELS: f64 = 255.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedBlock<T: Scalar> {
    rows: usize,
    cols: usize,
    codes: Vec<u8>,
    scale: Vec<T>,
    offset: Vec<T>,
}

impl<T: Scalar> QuantizedBlock<T> {
    pub fn from_parts(rows: usize, cols: usize, codes: Vec<u8>, scale: Vec<T>, offset: Vec<T>) -> Result<Self> {
        if codes.len() != rows * cols || scale.len() != cols || offset.len() != cols {
            return Err(Error::Format("quantized block sizes are inconsistent".into()));
        }
        Ok(Self { rows, cols, codes, scale, offset })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn code_row(&self, i: usize) -> &[u8] {
        &self.codes[i * self.cols..(i + 1) * self.cols]
    }

    pub fn scale(&self) -> &[T] {
        &self.scale
    }

    pub fn offset(&self) -> &[T] {
        &self.offset
    }

    pub fn dequantize_row_into(&self, i: usize, out: &mut [f64]) {
        for (((o, &c), s), m) in out.iter_mut().zip(self.code_row(i)).zip(&self.scale).zip(&self.offset) {
            *o = m.as_f64() + s.as_f64() * c as f64;
        }
    }

    pub fn dequantize(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.rows, self.cols);
        let mut buf = vec![0.0; self.cols];
        for i in 0..self.rows {
            self.dequantize_row_into(i, &mut buf);
            for (o, &v) in out.row_mut(i).iter_mut().zip(&buf) {
                *o = T::of(v);
            }
        }
        out
    }
}

/// `code = round((x - min_j) / scale_j)` with `scale_j = (max_j - min_j) / 255`
/// per column; constant columns get scale 0 and code 0.
pub fn quantize_8bit<T: Scalar>(vectors: &Matrix<T>) -> Result<QuantizedBlock<T>> {
    let (rows, cols) = (vectors.rows(), vectors.cols());
    if rows == 0 || cols == 0 {
        return Err(Error::InsufficientData("cannot quantize an empty block".into()));
    }
    if !vectors.is_finite() {
        return Err(Error::InvalidVector);
    }
    let mut lo = vec![f64::INFINITY; cols];
    let mut hi = vec![f64::NEG_INFINITY; cols];
    for row in vectors.row_iter() {
        for (j, v) in row.iter().enumerate() {
            let v = v.as_f64();
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    // Codes are taken against the stored (possibly rounded) scale and
    // offset, so f64 reconstruction stays within half a step of the input.
    let scale: Vec<T> = lo.iter().zip(&hi).map(|(l, h)| T::of((h - l) / LEVELS)).collect();
    let offset: Vec<T> = lo.iter().map(|&l| T::of(l)).collect();
    let mut codes = Vec::with_capacity(rows * cols);
    for row in vectors.row_iter() {
        for (j, v) in row.iter().enumerate() {
            let step = scale[j].as_f64();
            let code = if step > 0.0 { ((v.as_f64() - offset[j].as_f64()) / step).round() } else { 0.0 };
            codes.push(code.clamp(0.0, LEVELS) as u8);
        }
    }
    Ok(QuantizedBlock { rows, cols, codes, scale, offset })
}

pub fn dequantize<T: Scalar>(block: &QuantizedBlock<T>) -> Matrix<T> {
    block.dequantize()
}
