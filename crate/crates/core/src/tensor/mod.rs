//! Dense f64 tensors and reverse-mode differentiation.
//!
//! The carrier type is deliberately small: a shape plus a flat `Vec<f64>`
//! in row-major order. Only rank 1 and 2 are ever used. All reductions
//! run in a fixed serial order so results are bit-reproducible across
//! thread counts; the parallel kernels split work along rows and keep the
//! per-element arithmetic order identical to the serial path.

pub mod kernels;
pub mod nn;
pub mod tape;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Construct with validation: shape product must match the data
    /// length and every element must be finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor construction", &shape, &[data.len()]));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "non-finite value at flat index {pos} in tensor construction"
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for values produced by crate arithmetic.
    /// Skips the finiteness scan; divergence checks happen at the points
    /// that matter (loss values, parameter updates).
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a rank-2 tensor; a rank-1 tensor counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Columns of a rank-2 tensor, or the length of a rank-1 tensor.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => self.data.len(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// New tensor holding the given rows, in the given order. Indices out
    /// of range are an input error.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let r = self.rows();
        let c = self.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Input(format!(
                    "row index {i} out of range for {r} rows"
                )));
            }
            out.extend_from_slice(self.row(i));
        }
        Ok(Tensor::raw(vec![idx.len(), c], out))
    }

    /// Contiguous column block [lo, hi) of a rank-2 tensor.
    pub fn slice_cols(&self, lo: usize, hi: usize) -> Result<Tensor> {
        if self.shape.len() != 2 || hi > self.cols() || lo >= hi {
            return Err(Error::Input(format!(
                "bad column slice [{lo}, {hi}) on shape {:?}",
                self.shape
            )));
        }
        let r = self.rows();
        let mut out = Vec::with_capacity(r * (hi - lo));
        for i in 0..r {
            out.extend_from_slice(&self.row(i)[lo..hi]);
        }
        Ok(Tensor::raw(vec![r, hi - lo], out))
    }
}

/// Lowest index wins ties, which keeps argmax deterministic when logits
/// repeat exactly.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn new_rejects_nan() {
        let err = Tensor::new(vec![2], vec![0.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn gather_rows_basic() {
        let t = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let g = t.gather_rows(&[2, 0]).unwrap();
        assert_eq!(g.shape(), &[2, 2]);
        assert_eq!(g.data(), &[5.0, 6.0, 1.0, 2.0]);
        assert!(t.gather_rows(&[3]).is_err());
    }

    #[test]
    fn argmax_lowest_index_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[5.0]), 0);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    #[test]
    fn slice_cols_block() {
        let t = Tensor::matrix(2, 4, (0..8).map(|v| v as f64).collect()).unwrap();
        let b = t.slice_cols(1, 3).unwrap();
        assert_eq!(b.shape(), &[2, 2]);
        assert_eq!(b.data(), &[1.0, 2.0, 5.0, 6.0]);
    }
}
