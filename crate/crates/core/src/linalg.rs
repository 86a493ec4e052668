//! Dense row-major double-precision matrices and vectors.
//!
//! Reductions use a fixed left-to-right accumulation order so that every
//! computation is reproducible across runs on one platform.

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(Error::Shape("ragged row lengths".into()));
        }
        Ok(Self {
            rows: n_rows,
            cols: n_cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn diag(entries: &[f64]) -> Self {
        let n = entries.len();
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = entries[i];
        }
        m
    }

    /// Outer product `u v^T`.
    pub fn outer(u: &Vector, v: &Vector) -> Self {
        let mut m = Self::zeros(u.len(), v.len());
        for i in 0..u.len() {
            for j in 0..v.len() {
                m.data[i * v.len() + j] = u[i] * v[j];
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Standard product with a fixed accumulation order: each output entry
    /// sums over `k` ascending, so the result matches a naive triple loop
    /// exactly.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        // i-k-j loop: cache friendly, and per output entry the k-order is
        // still ascending.
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &Vector) -> Result<Vector> {
        if self.cols != v.len() {
            return Err(Error::Shape(format!(
                "matvec {}x{} by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = Vector::zeros(self.rows);
        for i in 0..self.rows {
            let mut acc = 0.0;
            for (a, b) in self.row(i).iter().zip(v.data()) {
                acc += a * b;
            }
            out[i] = acc;
        }
        Ok(out)
    }

    /// `self^T v` without materializing the transpose.
    pub fn matvec_t(&self, v: &Vector) -> Result<Vector> {
        if self.rows != v.len() {
            return Err(Error::Shape(format!(
                "matvec_t {}x{} by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = Vector::zeros(self.cols);
        for i in 0..self.rows {
            let s = v[i];
            for (o, &a) in out.data_mut().iter_mut().zip(self.row(i)) {
                *o += s * a;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "elementwise op on {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * alpha).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Frobenius norm of `self - self^T`, relative to `max(1, |self|_F)`.
    pub fn asymmetry(&self) -> f64 {
        if self.rows != self.cols {
            return f64::INFINITY;
        }
        let mut acc = 0.0;
        for i in 0..self.rows {
            for j in 0..self.cols {
                let d = self.at(i, j) - self.at(j, i);
                acc += d * d;
            }
        }
        acc.sqrt() / self.frobenius_norm().max(1.0)
    }

    /// `(self + self^T) / 2`; exact symmetry by construction.
    pub fn symmetrized(&self) -> Result<Matrix> {
        if self.rows != self.cols {
            return Err(Error::Shape("symmetrized requires a square matrix".into()));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[i * self.cols + j] = 0.5 * (self.at(i, j) + self.at(j, i));
            }
        }
        Ok(out)
    }

    /// Kronecker product `self (x) other`.
    pub fn kron(&self, other: &Matrix) -> Matrix {
        let rows = self.rows * other.rows;
        let cols = self.cols * other.cols;
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                let s = self.at(i, j);
                for p in 0..other.rows {
                    for q in 0..other.cols {
                        out.data[(i * other.rows + p) * cols + (j * other.cols + q)] =
                            s * other.at(p, q);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
        }
    }

    pub fn from_slice(values: &[f64]) -> Self {
        Self {
            data: values.to_vec(),
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { data }
    }

    /// Standard basis vector `e_i`.
    pub fn basis(len: usize, i: usize) -> Self {
        let mut v = Self::zeros(len);
        v[i] = 1.0;
        v
    }

    pub fn ones(len: usize) -> Self {
        Self {
            data: vec![1.0; len],
        }
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

    pub fn dot(&self, other: &Vector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn inf_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn add(&self, other: &Vector) -> Vector {
        debug_assert_eq!(self.len(), other.len());
        Vector {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        debug_assert_eq!(self.len(), other.len());
        Vector {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn scale(&self, alpha: f64) -> Vector {
        Vector {
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn hadamard(&self, other: &Vector) -> Vector {
        debug_assert_eq!(self.len(), other.len());
        Vector {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a * b)
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Unit vector in the direction of `self`; errors when the norm is zero.
    pub fn normalized(&self) -> Result<Vector> {
        let n = self.norm();
        if n == 0.0 {
            return Err(Error::Scale("cannot normalize the zero vector".into()));
        }
        Ok(self.scale(1.0 / n))
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

/// Matrix with i.i.d. normal(0, scale^2) entries, filled row-major from `rng`.
pub fn gaussian_matrix(
    rows: usize,
    cols: usize,
    scale: f64,
    rng: &mut RngStream,
) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::Shape("gaussian_matrix requires rows, cols >= 1".into()));
    }
    if !(scale > 0.0) {
        return Err(Error::Scale(format!(
            "gaussian_matrix scale must be positive, got {scale}"
        )));
    }
    let data = (0..rows * cols).map(|_| scale * rng.next_normal()).collect();
    Ok(Matrix { rows, cols, data })
}

/// Vector with i.i.d. normal(0, scale^2) entries.
pub fn gaussian_vector(len: usize, scale: f64, rng: &mut RngStream) -> Result<Vector> {
    if len == 0 {
        return Err(Error::Shape("gaussian_vector requires len >= 1".into()));
    }
    if !(scale > 0.0) {
        return Err(Error::Scale(format!(
            "gaussian_vector scale must be positive, got {scale}"
        )));
    }
    Ok(Vector {
        data: (0..len).map(|_| scale * rng.next_normal()).collect(),
    })
}

/// Uniform point on the unit sphere.
pub fn unit_vector(len: usize, rng: &mut RngStream) -> Result<Vector> {
    loop {
        let v = gaussian_vector(len, 1.0, rng)?;
        if let Ok(u) = v.normalized() {
            return Ok(u);
        }
    }
}

/// Random orthogonal matrix from Gram-Schmidt on a Gaussian square matrix.
pub fn random_orthogonal(n: usize, rng: &mut RngStream) -> Result<Matrix> {
    let g = gaussian_matrix(n, n, 1.0, rng)?;
    // Orthonormalize the columns with modified Gram-Schmidt.
    let mut cols: Vec<Vector> = (0..n)
        .map(|j| Vector::from_vec((0..n).map(|i| g.at(i, j)).collect()))
        .collect();
    for j in 0..n {
        for k in 0..j {
            let proj = cols[j].dot(&cols[k]);
            cols[j] = cols[j].sub(&cols[k].scale(proj));
        }
        cols[j] = cols[j].normalized().map_err(|_| {
            Error::Scale("rank-deficient Gaussian draw in random_orthogonal".into())
        })?;
    }
    let mut q = Matrix::zeros(n, n);
    for (j, c) in cols.iter().enumerate() {
        for i in 0..n {
            q.set(i, j, c[i]);
        }
    }
    Ok(q)
}
