//! Forward and backward passes for the network primitives: dense, ReLU,
//! batch normalization, concatenation and the MSE loss.
//!
//! Every function is free-standing. Forward passes in [`Mode::Train`] return an
//! [`ActivationCache`] which the matching `*_backward` consumes. Backward passes
//! return freshly allocated gradients; nothing accumulates across calls.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{add, matmul, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    pub fn keyword(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Linear => "linear",
        }
    }

    fn apply<T: Scalar>(self, z: &Matrix<T>) -> Matrix<T> {
        match self {
            Activation::Relu => relu(z),
            Activation::Linear => z.clone(),
        }
    }
}

/// Weights (`in_dim x out_dim`) and bias (`1 x out_dim`) of a dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams<T = f64> {
    pub weights: Matrix<T>,
    pub bias: Matrix<T>,
}

impl<T: Scalar> DenseParams<T> {
    pub fn new(weights: Matrix<T>, bias: Matrix<T>) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != weights.cols() {
            return Err(Error::Shape(format!(
                "bias must be 1x{} for {}x{} weights, got {}x{}",
                weights.cols(),
                weights.rows(),
                weights.cols(),
                bias.rows(),
                bias.cols()
            )));
        }
        Ok(Self { weights, bias })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| T::lit(rng.gen_range(-limit..limit)))
            .collect();
        Self {
            weights: Matrix::new(in_dim, out_dim, data).expect("positive layer dims"),
            bias: Matrix::zeros(1, out_dim),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weights: Matrix::zeros(in_dim, out_dim),
            bias: Matrix::zeros(1, out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }
}

/// Per-column statistics recorded by a train-mode batch-norm pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T = f64> {
    pub mean: Matrix<T>,
    pub var: Matrix<T>,
    pub inv_std: Matrix<T>,
    /// `(x - mean) * inv_std`, before scale and shift.
    pub normalized: Matrix<T>,
}

/// What a train-mode forward pass remembers for its backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache<T = f64> {
    pub input: Matrix<T>,
    pub net_input: Matrix<T>,
    pub output: Matrix<T>,
    pub batch_stats: Option<BatchStats<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads<T = f64> {
    pub input: Matrix<T>,
    pub weights: Matrix<T>,
    pub bias: Matrix<T>,
}

/// `activation(x W + b)`.
pub fn dense<T: Scalar>(
    x: &Matrix<T>,
    p: &DenseParams<T>,
    activation: Activation,
    mode: Mode,
) -> Result<(Matrix<T>, Option<ActivationCache<T>>)> {
    if x.cols() != p.in_dim() {
        return Err(Error::Shape(format!(
            "dense layer expects {} input columns, got {}x{}",
            p.in_dim(),
            x.rows(),
            x.cols()
        )));
    }
    let z = add(&matmul(x, &p.weights, false, false)?, &p.bias)?;
    let out = activation.apply(&z);
    let cache = match mode {
        Mode::Train => Some(ActivationCache {
            input: x.clone(),
            net_input: z,
            output: out.clone(),
            batch_stats: None,
        }),
        Mode::Infer => None,
    };
    Ok((out, cache))
}

pub fn dense_backward<T: Scalar>(
    grad_out: &Matrix<T>,
    p: &DenseParams<T>,
    activation: Activation,
    cache: &ActivationCache<T>,
) -> Result<DenseGrads<T>> {
    if grad_out.shape() != cache.net_input.shape() {
        return Err(Error::Shape(format!(
            "dense upstream gradient is {}x{}, layer output is {}x{}",
            grad_out.rows(),
            grad_out.cols(),
            cache.net_input.rows(),
            cache.net_input.cols()
        )));
    }
    let dz = match activation {
        Activation::Relu => relu_backward(grad_out, &cache.net_input)?,
        Activation::Linear => grad_out.clone(),
    };
    Ok(DenseGrads {
        input: matmul(&dz, &p.weights, false, true)?,
        weights: matmul(&cache.input, &dz, true, false)?,
        bias: dz.sum_rows(),
    })
}

/// `max(0, x)` elementwise.
pub fn relu<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `upstream` through where `input > 0`; the subgradient at 0 is 0.
pub fn relu_backward<T: Scalar>(upstream: &Matrix<T>, input: &Matrix<T>) -> Result<Matrix<T>> {
    if upstream.shape() != input.shape() {
        return Err(Error::Shape(format!(
            "relu gradient {}x{} does not match input {}x{}",
            upstream.rows(),
            upstream.cols(),
            input.rows(),
            input.cols()
        )));
    }
    let data = upstream
        .as_slice()
        .iter()
        .zip(input.as_slice())
        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Matrix::new(input.rows(), input.cols(), data)
}

pub const DEFAULT_BN_MOMENTUM: f64 = 0.99;
pub const DEFAULT_BN_EPSILON: f64 = 1e-3;

/// Learnable scale/shift plus running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T = f64> {
    pub gamma: Matrix<T>,
    pub beta: Matrix<T>,
    pub running_mean: Matrix<T>,
    pub running_var: Matrix<T>,
    pub momentum: T,
    pub epsilon: T,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(width: usize) -> Self {
        Self::with_hyper(width, T::lit(DEFAULT_BN_MOMENTUM), T::lit(DEFAULT_BN_EPSILON))
            .expect("default hyperparameters are valid")
    }

    pub fn with_hyper(width: usize, momentum: T, epsilon: T) -> Result<Self> {
        if !(momentum > T::zero() && momentum < T::one()) {
            return Err(Error::Config(format!("batchnorm momentum must be in (0,1), got {momentum}")));
        }
        if !(epsilon > T::zero()) {
            return Err(Error::Config(format!("batchnorm epsilon must be positive, got {epsilon}")));
        }
        Ok(Self {
            gamma: Matrix::filled(1, width, T::one()),
            beta: Matrix::zeros(1, width),
            running_mean: Matrix::zeros(1, width),
            running_var: Matrix::filled(1, width, T::one()),
            momentum,
            epsilon,
        })
    }

    pub fn width(&self) -> usize {
        self.gamma.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGrads<T = f64> {
    pub input: Matrix<T>,
    pub gamma: Matrix<T>,
    pub beta: Matrix<T>,
}

/// Batch normalization. Train mode normalizes by the batch's population
/// statistics and folds them into the running statistics; infer mode uses the
/// running statistics and leaves `s` untouched.
pub fn batchnorm<T: Scalar>(
    x: &Matrix<T>,
    s: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<(Matrix<T>, Option<ActivationCache<T>>)> {
    match mode {
        Mode::Infer => Ok((batchnorm_infer(x, s)?, None)),
        Mode::Train => {
            let (out, cache) = batchnorm_train_frozen(x, s)?;
            let stats = cache.batch_stats.as_ref().expect("train cache has stats");
            let m = s.momentum;
            let keep = T::one() - m;
            for c in 0..s.width() {
                let rm = s.running_mean.get(0, c);
                let rv = s.running_var.get(0, c);
                s.running_mean.set(0, c, m * rm + keep * stats.mean.get(0, c));
                s.running_var.set(0, c, m * rv + keep * stats.var.get(0, c));
            }
            Ok((out, Some(cache)))
        }
    }
}

fn check_bn_width<T: Scalar>(x: &Matrix<T>, s: &BatchNormState<T>) -> Result<()> {
    if x.cols() != s.width() {
        return Err(Error::Shape(format!(
            "batchnorm over {} features got {}x{} input",
            s.width(),
            x.rows(),
            x.cols()
        )));
    }
    Ok(())
}

/// Train-mode normalization without touching the running statistics.
pub fn batchnorm_train_frozen<T: Scalar>(
    x: &Matrix<T>,
    s: &BatchNormState<T>,
) -> Result<(Matrix<T>, ActivationCache<T>)> {
    check_bn_width(x, s)?;
    let n = x.rows();
    if n < 2 {
        return Err(Error::Shape(format!(
            "batchnorm in train mode needs at least 2 rows, got {n}"
        )));
    }
    let d = x.cols();
    let inv_n = T::one() / T::lit(n as f64);
    let mean = x.sum_rows().scale(inv_n);
    let mut var = Matrix::zeros(1, d);
    for r in 0..n {
        for c in 0..d {
            let dev = x.get(r, c) - mean.get(0, c);
            var.set(0, c, var.get(0, c) + dev * dev);
        }
    }
    let var = var.scale(inv_n);
    let inv_std = var.map(|v| T::one() / (v + s.epsilon).sqrt());

    let mut normalized = Matrix::zeros(n, d);
    let mut out = Matrix::zeros(n, d);
    for r in 0..n {
        for c in 0..d {
            let xh = (x.get(r, c) - mean.get(0, c)) * inv_std.get(0, c);
            normalized.set(r, c, xh);
            out.set(r, c, s.gamma.get(0, c) * xh + s.beta.get(0, c));
        }
    }
    let cache = ActivationCache {
        input: x.clone(),
        net_input: normalized.clone(),
        output: out.clone(),
        batch_stats: Some(BatchStats {
            mean,
            var,
            inv_std,
            normalized,
        }),
    };
    Ok((out, cache))
}

fn batchnorm_infer<T: Scalar>(x: &Matrix<T>, s: &BatchNormState<T>) -> Result<Matrix<T>> {
    check_bn_width(x, s)?;
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for c in 0..x.cols() {
        let inv_std = T::one() / (s.running_var.get(0, c) + s.epsilon).sqrt();
        let (g, b, mu) = (s.gamma.get(0, c), s.beta.get(0, c), s.running_mean.get(0, c));
        for r in 0..x.rows() {
            out.set(r, c, g * ((x.get(r, c) - mu) * inv_std) + b);
        }
    }
    Ok(out)
}

/// Full batch-norm gradient, including the paths through the batch mean and
/// variance.
pub fn batchnorm_backward<T: Scalar>(
    grad_out: &Matrix<T>,
    s: &BatchNormState<T>,
    cache: &ActivationCache<T>,
) -> Result<BatchNormGrads<T>> {
    let stats = cache
        .batch_stats
        .as_ref()
        .ok_or_else(|| Error::State("batchnorm backward needs a train-mode cache".into()))?;
    let (n, d) = stats.normalized.shape();
    if grad_out.shape() != (n, d) {
        return Err(Error::Shape(format!(
            "batchnorm upstream gradient is {}x{}, expected {n}x{d}",
            grad_out.rows(),
            grad_out.cols()
        )));
    }
    let nf = T::lit(n as f64);
    let mut dgamma = Matrix::zeros(1, d);
    let mut dbeta = Matrix::zeros(1, d);
    let mut sum_dxh = vec![T::zero(); d];
    let mut sum_dxh_xh = vec![T::zero(); d];
    for r in 0..n {
        for c in 0..d {
            let g = grad_out.get(r, c);
            let xh = stats.normalized.get(r, c);
            dgamma.set(0, c, dgamma.get(0, c) + g * xh);
            dbeta.set(0, c, dbeta.get(0, c) + g);
            let dxh = g * s.gamma.get(0, c);
            sum_dxh[c] += dxh;
            sum_dxh_xh[c] += dxh * xh;
        }
    }
    let mut dx = Matrix::zeros(n, d);
    for r in 0..n {
        for c in 0..d {
            let xh = stats.normalized.get(r, c);
            let dxh = grad_out.get(r, c) * s.gamma.get(0, c);
            let v = stats.inv_std.get(0, c) / nf * (nf * dxh - sum_dxh[c] - xh * sum_dxh_xh[c]);
            dx.set(r, c, v);
        }
    }
    Ok(BatchNormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    })
}

/// Column-wise concatenation in list order.
pub fn concat<T: Scalar>(parts: &[&Matrix<T>]) -> Result<Matrix<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat needs at least one part".into()))?;
    let rows = first.rows();
    if let Some(bad) = parts.iter().find(|p| p.rows() != rows) {
        return Err(Error::Shape(format!(
            "concat parts disagree on row count: {rows} vs {}",
            bad.rows()
        )));
    }
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Matrix::new(rows, cols, data)
}

/// Splits an upstream gradient back into blocks of the given widths.
pub fn concat_backward<T: Scalar>(upstream: &Matrix<T>, widths: &[usize]) -> Result<Vec<Matrix<T>>> {
    let total: usize = widths.iter().sum();
    if total != upstream.cols() || widths.contains(&0) {
        return Err(Error::Shape(format!(
            "cannot split {} columns into widths {widths:?}",
            upstream.cols()
        )));
    }
    let mut start = 0;
    widths
        .iter()
        .map(|&w| {
            let part = upstream.slice_cols(start, start + w);
            start += w;
            part
        })
        .collect()
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_loss<T: Scalar>(pred: &Matrix<T>, target: &Matrix<T>) -> Result<(T, Matrix<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "mse_loss prediction {}x{} vs target {}x{}",
            pred.rows(),
            pred.cols(),
            target.rows(),
            target.cols()
        )));
    }
    let n = T::lit(pred.len() as f64);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(pred.len());
    let two_over_n = T::lit(2.0) / n;
    for (&p, &t) in pred.as_slice().iter().zip(target.as_slice()) {
        let d = p - t;
        loss += d * d;
        grad.push(two_over_n * d);
    }
    Ok((loss / n, Matrix::new(pred.rows(), pred.cols(), grad)?))
}
