//! Ordinary least squares with an intercept, solved by Householder QR.
//!
//! The design matrix `[1 | X]` is factored column by column without pivoting.
//! When a column's component orthogonal to the earlier columns is negligible
//! relative to its own norm, the fit stops and names that column instead of
//! falling back to a pseudo-inverse.

use crate::data::FEATURE_NAMES;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel<T = f64> {
    /// `d x 1`.
    pub coefficients: Matrix<T>,
    pub intercept: T,
}

impl<T: Scalar> LinearModel<T> {
    pub fn predict(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.coefficients.rows() {
            return Err(Error::Shape(format!(
                "linear model has {} coefficients, got {}x{} input",
                self.coefficients.rows(),
                x.rows(),
                x.cols()
            )));
        }
        let mut out = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let mut acc = self.intercept;
            for (v, c) in x.row(r).iter().zip(self.coefficients.as_slice()) {
                acc += *v * *c;
            }
            out.push(acc);
        }
        Matrix::new(x.rows(), 1, out)
    }
}

fn column_label(col: usize, n_features: usize) -> String {
    if col == 0 {
        return "intercept".into();
    }
    let f = col - 1;
    if n_features == FEATURE_NAMES.len() {
        format!("feature {f} ({})", FEATURE_NAMES[f])
    } else {
        format!("feature {f}")
    }
}

/// Least-squares fit of `y ≈ intercept + X b`.
pub fn ols_fit<T: Scalar>(x: &Matrix<T>, y: &Matrix<T>) -> Result<LinearModel<T>> {
    let (n, d) = x.shape();
    let p = d + 1;
    if y.shape() != (n, 1) {
        return Err(Error::Shape(format!(
            "targets must be {n}x1, got {}x{}",
            y.rows(),
            y.cols()
        )));
    }
    if n <= p {
        return Err(Error::Fit(format!(
            "need more rows than the {p} unknowns (intercept + {d} features), got {n}"
        )));
    }

    // column-major copy of [1 | X]
    let mut a: Vec<Vec<T>> = Vec::with_capacity(p);
    a.push(vec![T::one(); n]);
    for c in 0..d {
        a.push((0..n).map(|r| x.get(r, c)).collect());
    }
    let col_norms: Vec<T> = a.iter().map(|c| c.iter().map(|&v| v * v).sum::<T>().sqrt()).collect();
    let mut b: Vec<T> = y.as_slice().to_vec();
    let mut r_diag = vec![T::zero(); p];
    let tol = T::lit(RANK_TOL);

    for k in 0..p {
        let norm = a[k][k..].iter().map(|&v| v * v).sum::<T>().sqrt();
        if !(norm > tol * col_norms[k]) || col_norms[k] == T::zero() {
            return Err(Error::Fit(format!(
                "design matrix is rank deficient: {} is linearly dependent on the preceding columns",
                column_label(k, d)
            )));
        }
        let alpha = if a[k][k] > T::zero() { -norm } else { norm };
        let mut v: Vec<T> = a[k][k..].to_vec();
        v[0] -= alpha;
        let vv: T = v.iter().map(|&e| e * e).sum();
        let two = T::lit(2.0);
        for col in a.iter_mut().skip(k + 1) {
            let dot: T = v.iter().zip(&col[k..]).map(|(&vi, &ci)| vi * ci).sum();
            let f = two * dot / vv;
            for (ci, &vi) in col[k..].iter_mut().zip(&v) {
                *ci -= f * vi;
            }
        }
        let dot: T = v.iter().zip(&b[k..]).map(|(&vi, &bi)| vi * bi).sum();
        let f = two * dot / vv;
        for (bi, &vi) in b[k..].iter_mut().zip(&v) {
            *bi -= f * vi;
        }
        r_diag[k] = alpha;
    }

    // back substitution on R beta = (Q^T y)[..p]; R's strict upper part lives in a[j][k], j > k
    let mut beta = vec![T::zero(); p];
    for k in (0..p).rev() {
        let mut acc = b[k];
        for j in k + 1..p {
            acc -= a[j][k] * beta[j];
        }
        beta[k] = acc / r_diag[k];
    }
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Fit("solution is not finite".into()));
    }
    Ok(LinearModel {
        intercept: beta[0],
        coefficients: Matrix::new(d, 1, beta[1..].to_vec())?,
    })
}

/// Fits on `(x_train, y_train)` and predicts `x_eval`.
pub fn ols_fit_predict<T: Scalar>(
    x_train: &Matrix<T>,
    y_train: &Matrix<T>,
    x_eval: &Matrix<T>,
) -> Result<(LinearModel<T>, Matrix<T>)> {
    let model = ols_fit(x_train, y_train)?;
    let pred = model.predict(x_eval)?;
    Ok((model, pred))
}
