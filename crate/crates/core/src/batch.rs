use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::scalar::Real;

/// `N x D` matrix of configurations, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch<T> {
    dim: usize,
    data: Vec<T>,
}

impl<T: Real> SampleBatch<T> {
    pub fn new(dim: usize, data: Vec<T>) -> Result<Self> {
        if dim == 0 {
            return shape_err("batch dimension must be positive");
        }
        if data.len() % dim != 0 {
            return shape_err(format!(
                "data length {} is not a multiple of dimension {dim}",
                data.len()
            ));
        }
        Ok(Self { dim, data })
    }

    pub fn zeros(n: usize, dim: usize) -> Self {
        Self { dim, data: vec![T::zero(); n * dim] }
    }

    pub fn from_rows(dim: usize, rows: impl IntoIterator<Item = Vec<T>>) -> Result<Self> {
        let mut data = Vec::new();
        for r in rows {
            if r.len() != dim {
                return shape_err(format!("row of length {} in batch of dimension {dim}", r.len()));
            }
            data.extend(r);
        }
        Self::new(dim, data)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[T]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// New batch made of the given rows, in order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { dim: self.dim, data }
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self { dim: self.dim, data: self.data[start * self.dim..end * self.dim].to_vec() }
    }

    pub fn cast<U: Real>(&self) -> SampleBatch<U> {
        SampleBatch { dim: self.dim, data: self.data.iter().map(|v| U::lit(v.as_f64())).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.dim != other.dim || self.len() != other.len() {
            return shape_err(format!(
                "{what}: {}x{} vs {}x{}",
                self.len(),
                self.dim,
                other.len(),
                other.dim
            ));
        }
        Ok(())
    }
}
