//! Dense column-major `f64` matrices sized for desk-scale experiments.
//!
//! Columns are the unit of work throughout the crate (samples are columns,
//! Jacobi SVD rotates column pairs, batches gather columns), so storage is
//! column-major and column views are contiguous slices.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense matrix with `rows x cols` finite entries in column-major order.
///
/// Zero-column matrices are legal; they appear as empty orthonormal bases and
/// as neutral operands of [`Mat::concat_cols`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatRepr", into = "MatRepr")]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Serialized form of [`Mat`]; deserialization re-checks the invariants.
#[derive(Serialize, Deserialize)]
struct MatRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<MatRepr> for Mat {
    type Error = Error;

    fn try_from(repr: MatRepr) -> Result<Mat> {
        Mat::from_col_major(repr.rows, repr.cols, repr.data)
    }
}

impl From<Mat> for MatRepr {
    fn from(m: Mat) -> MatRepr {
        MatRepr {
            rows: m.rows,
            cols: m.cols,
            data: m.data,
        }
    }
}

impl Mat {
    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Identity matrix of order `n`.
    pub fn identity(n: usize) -> Mat {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Builds a matrix from column-major data, validating length and
    /// finiteness.
    pub fn from_col_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Mat> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "expected {rows}x{cols} = {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "entry ({}, {}) of a {rows}x{cols} matrix is {}",
                pos % rows.max(1),
                pos / rows.max(1),
                data[pos]
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    /// Builds a matrix entry by entry; the closure receives `(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Mat {
        let mut data = Vec::with_capacity(rows * cols);
        for j in 0..cols {
            for i in 0..rows {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    /// Builds a matrix from equal-length column vectors.
    pub fn from_cols(cols: &[Vec<f64>]) -> Result<Mat> {
        let rows = cols.first().map_or(0, Vec::len);
        if cols.iter().any(|c| c.len() != rows) {
            return Err(Error::Dimension(
                "columns have differing lengths".to_string(),
            ));
        }
        Mat::from_col_major(rows, cols.len(), cols.concat())
    }

    /// Builds a matrix from equal-length rows (row-major input).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(Error::Dimension("rows have differing lengths".to_string()));
        }
        let nrows = rows.len();
        Mat::from_col_major(
            nrows,
            ncols,
            (0..ncols)
                .flat_map(|j| rows.iter().map(move |r| r[j]))
                .collect(),
        )
    }

    /// Matrix with independent standard-normal entries drawn from `rng`.
    pub fn standard_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
        Mat {
            rows,
            cols,
            data: (0..rows * cols).map(|_| standard_normal(rng)).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[j * self.rows + i]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[j * self.rows + i] = v;
    }

    /// Contiguous view of column `j`.
    pub fn col(&self, j: usize) -> &[f64] {
        debug_assert!(j < self.cols);
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    /// Mutable view of column `j`.
    pub fn col_mut(&mut self, j: usize) -> &mut [f64] {
        debug_assert!(j < self.cols);
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    /// Underlying column-major storage.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the column-major storage (used by the optimizer to
    /// update parameters in place).
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Matrix product `self * rhs`.
    pub fn matmul(&self, rhs: &Mat) -> Result<Mat> {
        if self.cols != rhs.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for j in 0..rhs.cols {
            let rhs_col = rhs.col(j);
            let out_col = &mut out.data[j * self.rows..(j + 1) * self.rows];
            for (k, &b) in rhs_col.iter().enumerate() {
                if b == 0.0 {
                    continue;
                }
                let lhs_col = &self.data[k * self.rows..(k + 1) * self.rows];
                for (o, &a) in out_col.iter_mut().zip(lhs_col) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Entry-wise sum `self + rhs`.
    pub fn add(&self, rhs: &Mat) -> Result<Mat> {
        self.zip_with(rhs, |a, b| a + b)
    }

    /// Entry-wise difference `self - rhs`.
    pub fn sub(&self, rhs: &Mat) -> Result<Mat> {
        self.zip_with(rhs, |a, b| a - b)
    }

    fn zip_with(&self, rhs: &Mat, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(Error::Dimension(format!(
                "entry-wise op on {}x{} and {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += c * rhs`.
    pub fn add_assign_scaled(&mut self, rhs: &Mat, c: f64) -> Result<()> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(Error::Dimension(format!(
                "accumulate {}x{} into {}x{}",
                rhs.rows, rhs.cols, self.rows, self.cols
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a += c * b;
        }
        Ok(())
    }

    /// Entry-wise scaling by `c`.
    pub fn scaled(&self, c: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| c * x).collect(),
        }
    }

    /// Gathers the given columns (in order, repeats allowed) into a new
    /// matrix.
    pub fn select_cols(&self, indices: &[usize]) -> Result<Mat> {
        if let Some(&bad) = indices.iter().find(|&&j| j >= self.cols) {
            return Err(Error::InvalidArgument(format!(
                "column index {bad} out of range for {} columns",
                self.cols
            )));
        }
        let mut data = Vec::with_capacity(self.rows * indices.len());
        for &j in indices {
            data.extend_from_slice(self.col(j));
        }
        Ok(Mat {
            rows: self.rows,
            cols: indices.len(),
            data,
        })
    }

    /// Adds `c * update` into the selected columns: column `k` of `update`
    /// accumulates into column `indices[k]` of `self`.
    pub fn scatter_add_cols(&mut self, indices: &[usize], update: &Mat, c: f64) -> Result<()> {
        if update.rows != self.rows || update.cols != indices.len() {
            return Err(Error::Dimension(format!(
                "scatter of {}x{} via {} indices into {}x{}",
                update.rows,
                update.cols,
                indices.len(),
                self.rows,
                self.cols
            )));
        }
        for (k, &j) in indices.iter().enumerate() {
            if j >= self.cols {
                return Err(Error::InvalidArgument(format!(
                    "column index {j} out of range for {} columns",
                    self.cols
                )));
            }
            let src = update.col(k);
            for (dst, &u) in self.col_mut(j).iter_mut().zip(src) {
                *dst += c * u;
            }
        }
        Ok(())
    }

    /// Frobenius norm.
    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Largest absolute entry (0 for an empty matrix).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    /// True if every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Horizontal concatenation `[A | B | ...]`. Zero-column operands act as
    /// the identity; row counts must agree across non-empty operands.
    pub fn concat_cols(parts: &[&Mat]) -> Result<Mat> {
        let rows = match parts.iter().find(|m| m.cols > 0) {
            Some(m) => m.rows,
            None => parts.first().map_or(0, |m| m.rows),
        };
        let mut data = Vec::new();
        let mut cols = 0;
        for part in parts {
            if part.cols == 0 {
                continue;
            }
            if part.rows != rows {
                return Err(Error::Dimension(format!(
                    "concat of {rows}-row and {}-row matrices",
                    part.rows
                )));
            }
            data.extend_from_slice(&part.data);
            cols += part.cols;
        }
        Ok(Mat { rows, cols, data })
    }
}

/// Dot product of two equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Euclidean norm of a slice.
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// One standard-normal draw via the Marsaglia polar method.
///
/// `rand` keeps its normal distribution in a separate crate; this sampler is
/// the only normal variate the workspace needs.
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let u: f64 = rng.gen_range(-1.0..1.0);
        let v: f64 = rng.gen_range(-1.0..1.0);
        let s = u * u + v * v;
        if s > 0.0 && s < 1.0 {
            return u * (-2.0 * s.ln() / s).sqrt();
        }
    }
}
