//! Dense row-major double-precision matrices, the single value type of the
//! autodiff tape and everything built on it.

use crate::error::{CvmimError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Array2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Array2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Array2D {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Array2D {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CvmimError::ShapeMismatch {
                op: "from_vec",
                lhs: format!("{rows}x{cols}"),
                rhs: format!("len {}", data.len()),
            });
        }
        Ok(Array2D { rows, cols, data })
    }

    /// Checked construction: rejects NaN/Inf.
    pub fn from_vec_checked(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(CvmimError::NonFinite {
                context: format!("Array2D::from_vec_checked got {v}"),
            });
        }
        Self::from_vec(rows, cols, data)
    }

    pub fn scalar(v: f64) -> Self {
        Array2D {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array2D {
        Array2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// C = A·B or A·Bᵀ.
    pub fn matmul(&self, other: &Array2D, trans_b: bool) -> Result<Array2D> {
        let (bk, bn) = if trans_b {
            (other.cols, other.rows)
        } else {
            (other.rows, other.cols)
        };
        if self.cols != bk {
            return Err(CvmimError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape_str(),
                rhs: format!("{}{}", other.shape_str(), if trans_b { "^T" } else { "" }),
            });
        }
        let mut out = Array2D::zeros(self.rows, bn);
        if trans_b {
            for i in 0..self.rows {
                let a_row = self.row(i);
                let o_row = &mut out.data[i * bn..(i + 1) * bn];
                for (j, o) in o_row.iter_mut().enumerate() {
                    let b_row = other.row(j);
                    let mut acc = 0.0;
                    for k in 0..self.cols {
                        acc += a_row[k] * b_row[k];
                    }
                    *o = acc;
                }
            }
        } else {
            for i in 0..self.rows {
                let a_row = self.row(i);
                let o_row = &mut out.data[i * bn..(i + 1) * bn];
                for (k, &a) in a_row.iter().enumerate() {
                    let b_row = other.row(k);
                    for (o, &b) in o_row.iter_mut().zip(b_row) {
                        *o += a * b;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Aᵀ·B without materializing the transpose.
    pub fn matmul_tn(&self, other: &Array2D) -> Result<Array2D> {
        if self.rows != other.rows {
            return Err(CvmimError::ShapeMismatch {
                op: "matmul_tn",
                lhs: self.shape_str(),
                rhs: other.shape_str(),
            });
        }
        let mut out = Array2D::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = other.row(r);
            for (i, &a) in a_row.iter().enumerate() {
                let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Array2D) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn uniform_init(rows: usize, cols: usize, limit: f64, rng: &mut Rng) -> Array2D {
        let data = (0..rows * cols)
            .map(|_| rng.uniform(-limit, limit))
            .collect();
        Array2D { rows, cols, data }
    }
}
