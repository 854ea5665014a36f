use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Format;

/// Which operand of the attention computation a matrix plays.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Q,
    K,
    V,
    O,
    S,
}

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    role: Role,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>, role: Role) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix {
            rows,
            cols,
            data,
            role,
        })
    }

    pub fn zeros(rows: usize, cols: usize, role: Role) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            role,
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], role: Role) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data, role)
    }

    /// i.i.d. standard normal entries rounded to `format`.
    pub fn random_gaussian<R: Rng + ?Sized>(
        rows: usize,
        cols: usize,
        role: Role,
        format: Format,
        rng: &mut R,
    ) -> Self {
        let data = (0..rows * cols)
            .map(|_| format.round(rng.sample::<f64, _>(StandardNormal), false))
            .collect();
        Matrix {
            rows,
            cols,
            data,
            role,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    /// Copy with every element rounded to `format`.
    pub fn rounded(&self, format: Format) -> Self {
        Matrix {
            data: self.data.iter().map(|&x| format.round(x, false)).collect(),
            ..self.clone()
        }
    }

    /// Same shape and identical bit patterns in every element.
    pub fn bitwise_eq(&self, other: &Matrix) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Rows whose bit patterns differ from `other`.
    pub fn differing_rows(&self, other: &Matrix) -> Vec<usize> {
        (0..self.rows.min(other.rows))
            .filter(|&i| {
                self.row(i)
                    .iter()
                    .zip(other.row(i))
                    .any(|(a, b)| a.to_bits() != b.to_bits())
            })
            .collect()
    }
}
