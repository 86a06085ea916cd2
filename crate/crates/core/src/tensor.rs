//! Dense row-major matrices.
//!
//! Rows are batch samples and columns are features. Every operation here is
//! pure: inputs are borrowed immutably and a fresh matrix is returned.
//! Reductions always run in ascending index order so results are bitwise
//! reproducible for fixed inputs.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, PartialEq)]
pub struct Matrix<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// Elementwise binary operator for [`elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if cols == 0 {
            return Err(Error::Shape(format!(
                "matrix needs at least one column, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        assert!(cols > 0, "matrix needs at least one column");
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    /// A matrix with no rows, e.g. an empty holdout partition.
    pub fn empty(cols: usize) -> Self {
        Self::filled(0, cols, T::zero())
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(n, cols, data)
    }

    /// A single-column matrix.
    pub fn column(values: &[T]) -> Result<Self> {
        Self::new(values.len(), 1, values.to_vec())
    }

    /// A single-row matrix.
    pub fn row_vector(values: &[T]) -> Result<Self> {
        Self::new(1, values.len(), values.to_vec())
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                out.push(self.get(r, c));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Column sums as a `1 x cols` matrix, accumulated top to bottom.
    pub fn sum_rows(&self) -> Self {
        let mut out = vec![T::zero(); self.cols];
        for r in 0..self.rows {
            for (acc, &v) in out.iter_mut().zip(self.row(r)) {
                *acc += v;
            }
        }
        Self {
            rows: 1,
            cols: self.cols,
            data: out,
        }
    }

    /// Copies the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::Shape(format!(
                    "row index {i} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Self::new(indices.len(), self.cols, data)
    }

    /// Columns `start..end` as a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.cols {
            return Err(Error::Shape(format!(
                "column range {start}..{end} invalid for {} columns",
                self.cols
            )));
        }
        let mut data = Vec::with_capacity(self.rows * (end - start));
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Self::new(self.rows, end - start, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, v| if v.abs() > acc { v.abs() } else { acc })
    }

    /// Frobenius norm.
    pub fn norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.data[r * self.cols..(r + 1) * self.cols])?;
        }
        if self.rows > 8 {
            writeln!(f, "  ... {} more rows", self.rows - 8)?;
        }
        write!(f, "]")
    }
}

fn describe(m: &Matrix<impl Scalar>, transposed: bool) -> String {
    if transposed {
        format!("{}x{} (transposed)", m.rows, m.cols)
    } else {
        format!("{}x{}", m.rows, m.cols)
    }
}

/// Matrix product `op(a) * op(b)` where `op` optionally transposes.
///
/// Every output element is accumulated as `0 + p_0 + p_1 + ...` over the inner
/// index in ascending order, independent of the transpose flags.
pub fn matmul<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    transpose_a: bool,
    transpose_b: bool,
) -> Result<Matrix<T>> {
    let (m, k) = if transpose_a {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let (kb, n) = if transpose_b {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    if k != kb {
        return Err(Error::Shape(format!(
            "matmul inner dimensions differ: a is {}, b is {}",
            describe(a, transpose_a),
            describe(b, transpose_b)
        )));
    }

    let out = match (transpose_a, transpose_b) {
        (false, false) => row_major_product(&a.data, &b.data, m, k, n),
        (true, false) => {
            // a is k x m; walk its rows so the inner loop still runs along j
            let mut out = vec![T::zero(); m * n];
            for p in 0..k {
                let a_row = &a.data[p * m..(p + 1) * m];
                let b_row = &b.data[p * n..(p + 1) * n];
                for (i, &a_pi) in a_row.iter().enumerate() {
                    let c_row = &mut out[i * n..(i + 1) * n];
                    for (c, &bv) in c_row.iter_mut().zip(b_row) {
                        *c += a_pi * bv;
                    }
                }
            }
            out
        }
        // a transposed copy of b keeps the vectorizable row-major kernel
        (false, true) => row_major_product(&a.data, &b.transpose().data, m, k, n),
        (true, true) => row_major_product(&a.transpose().data, &b.transpose().data, m, k, n),
    };
    Ok(Matrix {
        rows: m,
        cols: n,
        data: out,
    })
}

/// `c[i][j] = sum_p a[i][p] * b[p][j]` with both operands row-major, summed in
/// ascending `p`.
fn row_major_product<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c += a_ip * bv;
            }
        }
    }
    out
}

/// Elementwise `a op b`. `b` may also be `1 x a.cols`, in which case it is
/// applied to every row of `a`. No other broadcasting is performed.
pub fn elementwise<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, op: ElementwiseOp) -> Result<Matrix<T>> {
    let f = |x: T, y: T| match op {
        ElementwiseOp::Add => x + y,
        ElementwiseOp::Sub => x - y,
        ElementwiseOp::Mul => x * y,
    };
    if a.shape() == b.shape() {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Matrix {
            rows: a.rows,
            cols: a.cols,
            data,
        });
    }
    if b.rows == 1 && b.cols == a.cols {
        let mut data = Vec::with_capacity(a.data.len());
        for r in 0..a.rows {
            data.extend(a.row(r).iter().zip(&b.data).map(|(&x, &y)| f(x, y)));
        }
        return Ok(Matrix {
            rows: a.rows,
            cols: a.cols,
            data,
        });
    }
    Err(Error::Shape(format!(
        "elementwise {op:?} needs equal shapes or a 1x{} row, got {}x{} and {}x{}",
        a.cols, a.rows, a.cols, b.rows, b.cols
    )))
}

pub fn add<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    elementwise(a, b, ElementwiseOp::Add)
}

pub fn sub<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    elementwise(a, b, ElementwiseOp::Sub)
}

pub fn mul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    elementwise(a, b, ElementwiseOp::Mul)
}
