use std::ops::{Index, IndexMut};

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Matrix::from_vec",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dim("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { T::one() } else { T::zero() })
    }

    /// Uniform entries in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        Self::from_fn(rows, cols, |_, _| T::lit(rng.random_range(-bound..=bound)))
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact panics on zero; empty-width matrices yield empty rows
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Matrix<T>) {
        assert_eq!(self.shape(), other.shape(), "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn add_assign(&mut self, other: &Matrix<T>) {
        self.axpy(T::one(), other);
    }

    /// Horizontal concatenation `[a | b]`.
    pub fn hcat(a: &Matrix<T>, b: &Matrix<T>) -> Result<Self> {
        if a.rows != b.rows {
            return Err(Error::dim("Matrix::hcat rows", a.rows, b.rows));
        }
        let cols = a.cols + b.cols;
        let mut data = Vec::with_capacity(a.rows * cols);
        for r in 0..a.rows {
            data.extend_from_slice(a.row(r));
            data.extend_from_slice(b.row(r));
        }
        Ok(Matrix {
            rows: a.rows,
            cols,
            data,
        })
    }

    /// Splits columns at `at` into `[.., at)` and `[at, ..)`.
    pub fn hsplit(&self, at: usize) -> (Self, Self) {
        assert!(at <= self.cols);
        let left = Self::from_fn(self.rows, at, |r, c| self[(r, c)]);
        let right = Self::from_fn(self.rows, self.cols - at, |r, c| self[(r, at + c)]);
        (left, right)
    }

    /// Vertical stack of matrices with equal column counts.
    pub fn vstack(parts: &[&Matrix<T>]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::dim("Matrix::vstack cols", cols, p.cols));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Reinterprets the buffer with a new shape of equal size.
    pub fn reshape(self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.data.len() {
            return Err(Error::dim(
                "Matrix::reshape",
                self.data.len(),
                format!("{rows}x{cols}"),
            ));
        }
        Ok(Matrix {
            rows,
            cols,
            data: self.data,
        })
    }

    /// General product `op(a) * op(b)` scaled by `alpha`, accumulated into
    /// `beta * out`. `ta`/`tb` select the transposed operand.
    pub fn gemm_into(
        out: &mut Matrix<T>,
        alpha: T,
        a: &Matrix<T>,
        ta: bool,
        b: &Matrix<T>,
        tb: bool,
        beta: T,
    ) -> Result<()> {
        let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
        let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
        if k != k2 {
            return Err(Error::dim("gemm inner dimension", k, k2));
        }
        if out.shape() != (m, n) {
            return Err(Error::dim(
                "gemm output",
                format!("{m}x{n}"),
                format!("{}x{}", out.rows, out.cols),
            ));
        }
        if m == 0 || n == 0 {
            return Ok(());
        }
        if k == 0 {
            out.scale(beta);
            return Ok(());
        }
        let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
        let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
        // SAFETY: shapes were checked above; `out` is uniquely borrowed.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                alpha,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                beta,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Ok(())
    }

    /// `a * b`.
    pub fn matmul(&self, b: &Matrix<T>) -> Result<Self> {
        let mut out = Matrix::zeros(self.rows, b.cols);
        Self::gemm_into(&mut out, T::one(), self, false, b, false, T::zero())?;
        Ok(out)
    }

    /// `a * bᵀ`.
    pub fn matmul_t(&self, b: &Matrix<T>) -> Result<Self> {
        let mut out = Matrix::zeros(self.rows, b.rows);
        Self::gemm_into(&mut out, T::one(), self, false, b, true, T::zero())?;
        Ok(out)
    }

    /// Sum over rows, as a `1 x cols` matrix.
    pub fn col_sums(&self) -> Self {
        let mut out = Matrix::zeros(1, self.cols);
        for row in self.iter_rows() {
            for (o, &v) in out.data.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &T {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}
