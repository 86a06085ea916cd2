//! Regression metrics: R², MAE, MSE and RMSE.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Actual and predicted values, both `N x 1`.
#[derive(Debug, Clone, Copy)]
pub struct EvalPair<'a, T = f64> {
    actual: &'a Matrix<T>,
    predicted: &'a Matrix<T>,
}

impl<'a, T: Scalar> EvalPair<'a, T> {
    pub fn new(actual: &'a Matrix<T>, predicted: &'a Matrix<T>) -> Result<Self> {
        if actual.cols() != 1 || actual.shape() != predicted.shape() {
            return Err(Error::Shape(format!(
                "metrics need two Nx1 columns, got {}x{} actual and {}x{} predicted",
                actual.rows(),
                actual.cols(),
                predicted.rows(),
                predicted.cols()
            )));
        }
        Ok(Self { actual, predicted })
    }

    pub fn actual(&self) -> &'a Matrix<T> {
        self.actual
    }

    pub fn predicted(&self) -> &'a Matrix<T> {
        self.predicted
    }

    pub fn len(&self) -> usize {
        self.actual.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn pairs(&self) -> impl Iterator<Item = (T, T)> + '_ {
        self.actual
            .as_slice()
            .iter()
            .copied()
            .zip(self.predicted.as_slice().iter().copied())
    }

    fn n(&self) -> T {
        T::lit(self.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport<T = f64> {
    pub r2: T,
    pub mae: T,
    pub mse: T,
    pub rmse: T,
}

impl<T: Scalar> MetricsReport<T> {
    pub fn compute(p: &EvalPair<'_, T>) -> Result<Self> {
        Ok(Self {
            r2: r2(p)?,
            mae: mae(p),
            mse: mse(p),
            rmse: rmse(p),
        })
    }
}

/// `1 - SS_res / SS_tot`. Errors when the actual values have zero variance.
pub fn r2<T: Scalar>(p: &EvalPair<'_, T>) -> Result<T> {
    if p.len() < 2 {
        return Err(Error::Metric(format!("R² needs at least 2 samples, got {}", p.len())));
    }
    let mean = p.actual.as_slice().iter().copied().sum::<T>() / p.n();
    let mut ss_res = T::zero();
    let mut ss_tot = T::zero();
    for (y, yh) in p.pairs() {
        ss_res += (y - yh) * (y - yh);
        ss_tot += (y - mean) * (y - mean);
    }
    if ss_tot == T::zero() {
        return Err(Error::Metric("R² is undefined when all actual values are equal".into()));
    }
    Ok(T::one() - ss_res / ss_tot)
}

pub fn mae<T: Scalar>(p: &EvalPair<'_, T>) -> T {
    p.pairs().map(|(y, yh)| (y - yh).abs()).sum::<T>() / p.n()
}

pub fn mse<T: Scalar>(p: &EvalPair<'_, T>) -> T {
    p.pairs().map(|(y, yh)| (y - yh) * (y - yh)).sum::<T>() / p.n()
}

pub fn rmse<T: Scalar>(p: &EvalPair<'_, T>) -> T {
    mse(p).sqrt()
}
