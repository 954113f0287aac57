use crate::error::{HvplError, Result};

use super::Matrix;

/// Dense row-major rank-3 array, viewed as `d0` stacked `d1 × d2` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    d0: usize,
    d1: usize,
    d2: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(d0: usize, d1: usize, d2: usize) -> Self {
        Tensor3 {
            d0,
            d1,
            d2,
            data: vec![0.0; d0 * d1 * d2],
        }
    }

    pub fn from_vec(d0: usize, d1: usize, d2: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != d0 * d1 * d2 {
            return Err(HvplError::shape(
                "tensor3",
                format!("{} values for {d0}x{d1}x{d2}", data.len()),
            ));
        }
        Ok(Tensor3 { d0, d1, d2, data })
    }

    /// Stacks equally shaped matrices along a new leading axis.
    pub fn from_slices(slices: &[Matrix]) -> Result<Self> {
        let (d1, d2) = slices.first().map_or((0, 0), Matrix::shape);
        if slices.iter().any(|m| m.shape() != (d1, d2)) {
            return Err(HvplError::shape("tensor3", "slices differ in shape"));
        }
        let mut data = Vec::with_capacity(slices.len() * d1 * d2);
        for m in slices {
            data.extend_from_slice(m.data());
        }
        Ok(Tensor3 {
            d0: slices.len(),
            d1,
            d2,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d0, self.d1, self.d2)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.d1 + j) * self.d2 + k]
    }

    pub fn slice(&self, i: usize) -> Matrix {
        let n = self.d1 * self.d2;
        Matrix::from_vec(self.d1, self.d2, self.data[i * n..(i + 1) * n].to_vec())
            .expect("slice length matches")
    }

    /// Collapses the two leading axes: `(d0·d1) × d2`.
    pub fn flatten_leading(&self) -> Matrix {
        Matrix::from_vec(self.d0 * self.d1, self.d2, self.data.clone()).expect("same length")
    }

    pub fn bitwise_eq(&self, other: &Tensor3) -> bool {
        self.dims() == other.dims()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
