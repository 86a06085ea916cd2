//! Adam with bias-corrected moment estimates.

use crate::error::{Error, Result};
use crate::graph::{ModelGraph, ParamSlot};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper<T = f64> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Scalar> Default for AdamHyper<T> {
    fn default() -> Self {
        Self {
            learning_rate: T::lit(0.001),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            epsilon: T::lit(1e-7),
        }
    }
}

impl<T: Scalar> AdamHyper<T> {
    pub fn with_learning_rate(learning_rate: T) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > T::zero()) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.epsilon > T::zero()) {
            return Err(Error::Config(format!("adam epsilon must be positive, got {}", self.epsilon)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b >= T::zero() && b < T::one()) {
                return Err(Error::Config(format!("{name} must be in [0,1), got {b}")));
            }
        }
        Ok(())
    }
}

/// Per-tensor moment estimates, aligned with [`ModelGraph::param_slots`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f64> {
    pub names: Vec<String>,
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
    pub t: u64,
    pub hyper: AdamHyper<T>,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments for the given `(name, shape)` list.
    pub fn for_shapes(shapes: &[(String, (usize, usize))], hyper: AdamHyper<T>) -> Result<Self> {
        hyper.validate()?;
        Ok(Self {
            names: shapes.iter().map(|(n, _)| n.clone()).collect(),
            m: shapes.iter().map(|(_, (r, c))| Matrix::zeros(*r, *c)).collect(),
            v: shapes.iter().map(|(_, (r, c))| Matrix::zeros(*r, *c)).collect(),
            t: 0,
            hyper,
        })
    }

    /// Total number of scalars tracked by each of `m` and `v`.
    pub fn len(&self) -> usize {
        self.m.iter().map(Matrix::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One step over every trainable tensor of `g`, using its stored gradients.
    pub fn step_graph(&mut self, g: &mut ModelGraph<T>) -> Result<()> {
        adam_step(&mut g.param_slots(), self)
    }
}

pub fn adam_init<T: Scalar>(g: &ModelGraph<T>, hyper: AdamHyper<T>) -> Result<AdamState<T>> {
    let shapes: Vec<(String, (usize, usize))> =
        g.gradients().into_iter().map(|(n, m)| (n, m.shape())).collect();
    AdamState::for_shapes(&shapes, hyper)
}

/// `t += 1`, then for every scalar:
///
/// ```text
/// m = b1 m + (1 - b1) g
/// v = b2 v + (1 - b2) g^2
/// p -= lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// ```
///
/// `eps` is added after the square root.
pub fn adam_step<T: Scalar>(slots: &mut [ParamSlot<'_, T>], s: &mut AdamState<T>) -> Result<()> {
    if slots.len() != s.m.len() {
        return Err(Error::Shape(format!(
            "optimizer tracks {} tensors, got {}",
            s.m.len(),
            slots.len()
        )));
    }
    for (i, slot) in slots.iter().enumerate() {
        let want = s.m[i].shape();
        if slot.value.shape() != want || slot.grad.shape() != want {
            return Err(Error::Shape(format!(
                "tensor '{}' is {:?} with gradient {:?}, optimizer state is {want:?}",
                slot.name,
                slot.value.shape(),
                slot.grad.shape()
            )));
        }
    }

    s.t += 1;
    let h = s.hyper;
    let t = i32::try_from(s.t).unwrap_or(i32::MAX);
    let bias1 = T::one() - h.beta1.powi(t);
    let bias2 = T::one() - h.beta2.powi(t);
    let (keep1, keep2) = (T::one() - h.beta1, T::one() - h.beta2);

    for (i, slot) in slots.iter_mut().enumerate() {
        let m = s.m[i].as_mut_slice();
        let v = s.v[i].as_mut_slice();
        let p = slot.value.as_mut_slice();
        for (((pj, mj), vj), &g) in p.iter_mut().zip(m).zip(v).zip(slot.grad.as_slice()) {
            *mj = h.beta1 * *mj + keep1 * g;
            *vj = h.beta2 * *vj + keep2 * g * g;
            let m_hat = *mj / bias1;
            let v_hat = *vj / bias2;
            *pj -= h.learning_rate * m_hat / (v_hat.sqrt() + h.epsilon);
        }
    }
    Ok(())
}
