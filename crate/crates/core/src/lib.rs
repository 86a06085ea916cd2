//! A multi-level dense-layer neural network for tabular regression, built
//! from scratch: matrices, layers, a layer graph with reverse-mode gradients,
//! Adam, data preparation, metrics, an OLS baseline, reports and a CLI.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for callers who do not care.

pub mod baseline;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod modelspec;
pub mod optim;
pub mod report;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{GraphBuilder, ModelGraph};
pub use modelspec::{parse_spec, ArchitectureSpec};
pub use scalar::Scalar;
pub use tensor::{matmul, Matrix};
pub use train::{evaluate, grad_check, train_loop, TrainConfig};

pub type Matrix64 = tensor::Matrix<f64>;
pub type Matrix32 = tensor::Matrix<f32>;
pub type ModelGraph64 = graph::ModelGraph<f64>;
pub type ModelGraph32 = graph::ModelGraph<f32>;
pub type Dataset64 = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
