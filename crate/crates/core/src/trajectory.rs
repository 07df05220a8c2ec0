use nalgebra::DVector;

use crate::error::{Error, Result};

/// A time-indexed sequence of fixed-dimension vectors, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    dim: usize,
    data: Vec<f64>,
}

impl Trajectory {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
        }
    }

    pub fn with_capacity(dim: usize, len: usize) -> Self {
        Self {
            dim,
            data: Vec::with_capacity(dim * len),
        }
    }

    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Dimension(format!(
                "{} values cannot be split into rows of {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows<'a>(dim: usize, rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut t = Self::new(dim);
        for r in rows {
            t.try_push(r)?;
        }
        Ok(t)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn vector(&self, t: usize) -> DVector<f64> {
        DVector::from_row_slice(self.row(t))
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn push(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.dim, "row dimension");
        self.data.extend_from_slice(row);
    }

    pub fn try_push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::Dimension(format!(
                "row of length {} pushed into trajectory of dim {}",
                row.len(),
                self.dim
            )));
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    /// First `len` rows.
    pub fn prefix(&self, len: usize) -> Self {
        Self {
            dim: self.dim,
            data: self.data[..len.min(self.len()) * self.dim].to_vec(),
        }
    }

    /// Rows from `start` on.
    pub fn skip(&self, start: usize) -> Self {
        Self {
            dim: self.dim,
            data: self.data[start.min(self.len()) * self.dim..].to_vec(),
        }
    }

    /// Column `j` as a time series.
    pub fn component(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }
}
