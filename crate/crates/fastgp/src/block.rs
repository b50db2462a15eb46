//! Column-major matrix of right-hand sides / solutions, shared by the MVM
//! batching and the multi-RHS conjugate gradient solver.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    n: usize,
    ncols: usize,
    data: Vec<f64>,
}

impl Block {
    pub fn zeros(n: usize, ncols: usize) -> Self {
        Self { n, ncols, data: vec![0.0; n * ncols] }
    }

    pub fn from_column(col: Vec<f64>) -> Self {
        let n = col.len();
        Self { n, ncols: 1, data: col }
    }

    pub fn from_columns(cols: &[Vec<f64>]) -> Result<Self> {
        if cols.is_empty() {
            return Err(Error::InvalidParameter("block needs at least one column".into()));
        }
        let n = cols[0].len();
        let mut data = Vec::with_capacity(n * cols.len());
        for c in cols {
            if c.len() != n {
                return Err(Error::DimensionMismatch { context: "block column", expected: n, got: c.len() });
            }
            data.extend_from_slice(c);
        }
        Ok(Self { n, ncols: cols.len(), data })
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.n..(j + 1) * self.n]
    }

    pub fn col_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.n..(j + 1) * self.n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// y += alpha * x
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
