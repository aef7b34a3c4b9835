//! Dense row-major `f64` tensors and the handful of numeric kernels the rest
//! of the crate is built on.
//!
//! Everything is 64-bit: the test suite checks analytic gradients against
//! central finite differences at 1e-4 relative tolerance, which 32-bit
//! arithmetic cannot support.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Minimum number of multiply-adds before a matmul is split across threads.
/// Below this the rayon dispatch overhead outweighs the work.
const PAR_FLOP_THRESHOLD: usize = 1 << 17;

/// Dense n-dimensional array of `f64`, row-major.
///
/// The flat buffer length always equals the product of the shape. All
/// constructors and operations preserve finiteness: finite inputs produce
/// finite outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and a flat row-major buffer.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} (expected {})",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Rank-1 tensor borrowing the slice's contents.
    pub fn from_slice(values: &[f64]) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    /// Rank-2 tensor from rows; all rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Shape("from_rows needs at least one row".into()));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has length {} but row 0 has length {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// The single dimension of a rank-1 tensor.
    pub fn dims1(&self) -> Result<usize> {
        match self.shape.as_slice() {
            [n] => Ok(*n),
            other => Err(Error::Shape(format!("expected rank-1, got shape {other:?}"))),
        }
    }

    /// The two dimensions of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            other => Err(Error::Shape(format!("expected rank-2, got shape {other:?}"))),
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[self.rank() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let cols = self.shape[self.rank() - 1];
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {} elements into {shape:?}",
                self.data.len()
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "elementwise op on mismatched shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// True when both tensors have identical shape and bit-identical payloads.
    /// Unlike `==` this distinguishes `0.0` from `-0.0` and never treats two
    /// NaNs as unequal storage.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn accumulate_row(a_row: &[f64], b: &[f64], n: usize, out_row: &mut [f64]) {
    for (k, &aik) in a_row.iter().enumerate() {
        // Zero activations (masked or perturbed pixels) contribute nothing;
        // skipping them is bit-identical for finite operands.
        if aik == 0.0 {
            continue;
        }
        let b_row = &b[k * n..(k + 1) * n];
        for (o, &bkj) in out_row.iter_mut().zip(b_row) {
            *o += aik * bkj;
        }
    }
}

/// Standard matrix product of `a: [m, k]` and `b: [k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if ka != kb {
        return Err(Error::Shape(format!(
            "matmul inner dimensions disagree: [{m}, {ka}] x [{kb}, {n}]"
        )));
    }
    let mut out = vec![0.0; m * n];
    if m * ka * n >= PAR_FLOP_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, out_row)| accumulate_row(a.row(i), b.data(), n, out_row));
    } else {
        for (i, out_row) in out.chunks_mut(n).enumerate() {
            accumulate_row(a.row(i), b.data(), n, out_row);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a * b^T` for `a: [m, k]`, `b: [n, k]`, without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = a.dims2()?;
    let (n, kb) = b.dims2()?;
    if ka != kb {
        return Err(Error::Shape(format!(
            "matmul_nt inner dimensions disagree: [{m}, {ka}] x [{n}, {kb}]^T"
        )));
    }
    let mut out = vec![0.0; m * n];
    let dot = |i: usize, out_row: &mut [f64]| {
        let a_row = a.row(i);
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = b.row(j);
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o = acc;
        }
    };
    if m * ka * n >= PAR_FLOP_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, out_row)| dot(i, out_row));
    } else {
        for (i, out_row) in out.chunks_mut(n).enumerate() {
            dot(i, out_row);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a^T * b` for `a: [k, m]`, `b: [k, n]`, without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ka, m) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if ka != kb {
        return Err(Error::Shape(format!(
            "matmul_tn inner dimensions disagree: [{ka}, {m}]^T x [{kb}, {n}]"
        )));
    }
    let mut out = vec![0.0; m * n];
    let fill_row = |i: usize, out_row: &mut [f64]| {
        for k in 0..ka {
            let aki = a.data()[k * m + i];
            if aki == 0.0 {
                continue;
            }
            let b_row = b.row(k);
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aki * bkj;
            }
        }
    };
    if m * ka * n >= PAR_FLOP_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, out_row)| fill_row(i, out_row));
    } else {
        for (i, out_row) in out.chunks_mut(n).enumerate() {
            fill_row(i, out_row);
        }
    }
    Tensor::new(vec![m, n], out)
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(logits) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Numerically stable softmax of a rank-1 tensor (max-subtraction).
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let c = logits.dims1()?;
    if c == 0 {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    let mut out = vec![0.0; c];
    softmax_into(logits.data(), &mut out);
    Tensor::new(vec![c], out)
}

/// Row-wise softmax of a rank-2 `[batch, c]` tensor.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (batch, c) = logits.dims2()?;
    let mut out = vec![0.0; batch * c];
    for (i, out_row) in out.chunks_mut(c).enumerate() {
        softmax_into(logits.row(i), out_row);
    }
    Tensor::new(vec![batch, c], out)
}

/// Index of the maximum entry; ties break toward the lowest index.
pub fn argmax(values: &Tensor) -> Result<usize> {
    let c = values.dims1()?;
    if c == 0 {
        return Err(Error::Shape("argmax of an empty vector".into()));
    }
    Ok(argmax_slice(values.data()))
}

pub(crate) fn argmax_slice(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
