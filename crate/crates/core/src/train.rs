//! Mini-batch training loop, evaluation, and a whole-graph gradient check.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{SplitDataset, DEFAULT_VALIDATION_FRACTION};
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::layers::{mse_loss, Mode};
use crate::metrics::{mae, mse, EvalPair, MetricsReport};
use crate::optim::{adam_init, AdamHyper};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Stream id for the per-epoch shuffles, keeping them independent of the
/// train/test split drawn from the same seed.
const SHUFFLE_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Used when building the [`SplitDataset`]; the loop itself trains on
    /// whatever partition it is handed.
    pub validation_fraction: f64,
    pub seed: u64,
    pub shuffle_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            learning_rate: 0.001,
            batch_size: 32,
            validation_fraction: DEFAULT_VALIDATION_FRACTION,
            seed: 0,
            shuffle_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be at least 2 for batch normalization, got {}",
                self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation fraction must be in [0,1), got {}",
                self.validation_fraction
            )));
        }
        AdamHyper::<f64>::with_learning_rate(self.learning_rate).validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord<T = f64> {
    pub train_mae: T,
    pub train_mse: T,
    pub val_mae: Option<T>,
    pub val_mse: Option<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct History<T = f64> {
    pub records: Vec<EpochRecord<T>>,
    pub duration: Duration,
}

impl<T: Scalar> History<T> {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// CSV with a 1-based epoch column. Missing validation values are empty
    /// fields. Wall-clock time is deliberately left out so that identical runs
    /// produce identical files.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_mae,train_mse,val_mae,val_mse\n");
        let opt = |v: Option<T>| v.map(|v| format!("{v}")).unwrap_or_default();
        for (i, r) in self.records.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                i + 1,
                r.train_mae,
                r.train_mse,
                opt(r.val_mae),
                opt(r.val_mse)
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Splits `order` into batches of `batch_size`; a trailing batch with fewer
/// than 2 rows is merged into the one before it.
fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    if out.len() >= 2 && out[out.len() - 1].len() < 2 {
        out.pop();
        let start = (out.len() - 1) * batch_size;
        let last = out.len() - 1;
        out[last] = &order[start..];
    }
    out
}

fn mae_mse<T: Scalar>(g: &ModelGraph<T>, x: &Matrix<T>, y: &Matrix<T>) -> Result<(T, T)> {
    let pred = g.predict(x)?;
    let p = EvalPair::new(y, &pred)?;
    Ok((mae(&p), mse(&p)))
}

/// Trains `g` in place on `data.train`, recording epoch-end metrics on the
/// full training and validation partitions (inference mode).
///
/// `data` must already be normalized. Training is deterministic for a given
/// graph, data and config.
pub fn train_loop<T: Scalar>(g: &mut ModelGraph<T>, data: &SplitDataset<T>, cfg: &TrainConfig) -> Result<History<T>> {
    cfg.validate()?;
    let fit = &data.train;
    if fit.features.cols() != g.input_width() {
        return Err(Error::Shape(format!(
            "graph expects {} features, training data has {}",
            g.input_width(),
            fit.features.cols()
        )));
    }
    if g.output_width() != 1 {
        return Err(Error::Shape(format!(
            "regression training needs a single output, graph has {}",
            g.output_width()
        )));
    }
    if fit.len() < 2 {
        return Err(Error::Config(format!(
            "training needs at least 2 rows, got {}",
            fit.len()
        )));
    }

    let start = Instant::now();
    let mut adam = adam_init(g, AdamHyper::with_learning_rate(T::lit(cfg.learning_rate)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..fit.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        if cfg.shuffle_each_epoch {
            order.shuffle(&mut rng);
        }
        for batch in batches(&order, cfg.batch_size) {
            let x = fit.features.select_rows(batch)?;
            let y = fit.targets.select_rows(batch)?;
            let pred = g.forward(&x, Mode::Train)?;
            let (loss, grad) = mse_loss(&pred, &y)?;
            if !loss.is_finite() {
                return Err(Error::Fit(format!("loss became {loss} during epoch {epoch}")));
            }
            g.backward(&grad)?;
            adam.step_graph(g)?;
        }

        let (train_mae, train_mse) = mae_mse(g, &fit.features, &fit.targets)?;
        let (val_mae, val_mse) = if data.validation.is_empty() {
            (None, None)
        } else {
            let (a, b) = mae_mse(g, &data.validation.features, &data.validation.targets)?;
            (Some(a), Some(b))
        };
        if !train_mse.is_finite() {
            return Err(Error::Fit(format!("training error became {train_mse} after epoch {epoch}")));
        }
        records.push(EpochRecord {
            train_mae,
            train_mse,
            val_mae,
            val_mse,
        });
    }
    Ok(History {
        records,
        duration: start.elapsed(),
    })
}

/// Inference-mode predictions scored with all four metrics.
pub fn evaluate<T: Scalar>(g: &ModelGraph<T>, features: &Matrix<T>, targets: &Matrix<T>) -> Result<MetricsReport<T>> {
    let pred = g.predict(features)?;
    MetricsReport::compute(&EvalPair::new(targets, &pred)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tolerance: f64,
    /// Seed for choosing which scalars of large tensors to probe.
    pub sample_seed: u64,
    /// Tensors smaller than this are probed exhaustively.
    pub exhaustive_below: usize,
    pub samples_per_tensor: usize,
    /// Multiply one tensor's analytic gradient before comparing.
    pub fault: Option<(String, f64)>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tolerance: 1e-4,
            sample_seed: 0,
            exhaustive_below: 500,
            samples_per_tensor: 200,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub passed: bool,
    pub worst_tensor: String,
    pub checked: usize,
}

pub fn grad_check<T: Scalar>(g: &ModelGraph<T>, x: &Matrix<T>, y: &Matrix<T>, h: f64, tolerance: f64) -> Result<GradCheckReport> {
    grad_check_with(
        g,
        x,
        y,
        &GradCheckOptions {
            h,
            tolerance,
            ..GradCheckOptions::default()
        },
    )
}

fn read_scalar<T: Scalar>(g: &mut ModelGraph<T>, name: &str, i: usize) -> T {
    g.tensor_mut(name).expect("tensor listed by gradients()").as_slice()[i]
}

fn write_scalar<T: Scalar>(g: &mut ModelGraph<T>, name: &str, i: usize, v: T) {
    g.tensor_mut(name).expect("tensor listed by gradients()").as_mut_slice()[i] = v;
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compares analytic gradients of the MSE loss against central differences.
///
/// Batch-norm layers use batch statistics with their running statistics
/// frozen, so every probe sees the same function. A scalar that fails at `h`
/// is probed once more at `h / 10` (a ReLU kink inside the stencil is the
/// usual cause) and that second result stands. `g` itself is not modified.
pub fn grad_check_with<T: Scalar>(g: &ModelGraph<T>, x: &Matrix<T>, y: &Matrix<T>, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if !(opts.h > 0.0) {
        return Err(Error::Config(format!("step h must be positive, got {}", opts.h)));
    }
    let mut g = g.clone();
    let loss_at = |g: &mut ModelGraph<T>| -> Result<f64> {
        let pred = g.forward_train_frozen(x)?;
        Ok(mse_loss(&pred, y)?.0.as_f64())
    };

    let pred = g.forward_train_frozen(x)?;
    let (_, grad) = mse_loss(&pred, y)?;
    g.backward(&grad)?;
    if let Some((name, factor)) = &opts.fault {
        if !g.scale_gradient(name, T::lit(*factor)) {
            return Err(Error::Config(format!("no trainable tensor named '{name}'")));
        }
    }
    let analytic: Vec<(String, Matrix<T>)> = g.gradients().into_iter().map(|(n, m)| (n, m.clone())).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.sample_seed);
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for (name, grad) in &analytic {
        let len = grad.len();
        let picks: Vec<usize> = if len < opts.exhaustive_below {
            (0..len).collect()
        } else {
            let mut v = index::sample(&mut rng, len, opts.samples_per_tensor.min(len)).into_vec();
            v.sort_unstable();
            v
        };
        for i in picks {
            let a = grad.as_slice()[i].as_f64();
            let mut probe = |step: f64| -> Result<f64> {
                let orig = read_scalar(&mut g, name, i);
                write_scalar(&mut g, name, i, orig + T::lit(step));
                let up = loss_at(&mut g)?;
                write_scalar(&mut g, name, i, orig - T::lit(step));
                let down = loss_at(&mut g)?;
                write_scalar(&mut g, name, i, orig);
                Ok((up - down) / (2.0 * step))
            };
            let mut err = relative_error(a, probe(opts.h)?);
            if err > opts.tolerance {
                err = relative_error(a, probe(opts.h / 10.0)?);
            }
            if err > worst.0 || worst.1.is_empty() {
                worst = (err, name.clone());
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        passed: worst.0 <= opts.tolerance,
        worst_tensor: worst.1,
        checked,
    })
}
