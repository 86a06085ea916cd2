//! Housing CSV ingestion, seeded train/test partitioning, the tail validation
//! holdout, and z-score feature normalization.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{elementwise, ElementwiseOp, Matrix};

/// Feature columns, in the order they are stored.
pub const FEATURE_NAMES: [&str; 13] = [
    "CRIM", "ZN", "INDUS", "CHAS", "NOX", "RM", "AGE", "DIS", "RAD", "TAX", "PTRATIO", "B", "LSTAT",
];
pub const TARGET_NAME: &str = "MEDV";
pub const FEATURE_COUNT: usize = FEATURE_NAMES.len();
const CHAS_INDEX: usize = 3;

/// Rows placed in the training partition of the reference experiment.
pub const DEFAULT_TRAIN_ROWS: usize = 405;
pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.2;
pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T = f64> {
    /// `n x 13`, columns in [`FEATURE_NAMES`] order.
    pub features: Matrix<T>,
    /// `n x 1` median home value in $1000s.
    pub targets: Matrix<T>,
    /// Row index in the source file (0-based, header excluded).
    pub row_ids: Vec<usize>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(features: Matrix<T>, targets: Matrix<T>, row_ids: Vec<usize>) -> Result<Self> {
        if targets.cols() != 1 || targets.rows() != features.rows() || row_ids.len() != features.rows() {
            return Err(Error::Shape(format!(
                "dataset with {} feature rows needs {0}x1 targets and {0} row ids, got {}x{} and {}",
                features.rows(),
                targets.rows(),
                targets.cols(),
                row_ids.len()
            )));
        }
        Ok(Self {
            features,
            targets,
            row_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows at the given positions, in that order.
    pub fn select(&self, positions: &[usize]) -> Result<Self> {
        Ok(Self {
            features: self.features.select_rows(positions)?,
            targets: self.targets.select_rows(positions)?,
            row_ids: positions.iter().map(|&i| self.row_ids[i]).collect(),
        })
    }

    /// Concatenates the rows of `self` and `other`.
    pub fn append(&self, other: &Self) -> Result<Self> {
        let order: Vec<usize> = (0..self.len() + other.len()).collect();
        let mut f = self.features.as_slice().to_vec();
        f.extend_from_slice(other.features.as_slice());
        let mut t = self.targets.as_slice().to_vec();
        t.extend_from_slice(other.targets.as_slice());
        let mut ids = self.row_ids.clone();
        ids.extend_from_slice(&other.row_ids);
        Self::new(
            Matrix::new(order.len(), self.features.cols(), f)?,
            Matrix::new(order.len(), 1, t)?,
            ids,
        )
    }

    /// Same rows with features replaced by `nz.transform(features)`.
    pub fn normalized(&self, nz: &Normalizer<T>) -> Result<Self> {
        Ok(Self {
            features: nz.transform(&self.features)?,
            targets: self.targets.clone(),
            row_ids: self.row_ids.clone(),
        })
    }
}

/// Reads a housing CSV from disk. See [`parse_csv`].
pub fn load_csv<T: Scalar>(path: impl AsRef<Path>) -> Result<Dataset<T>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_csv(&bytes[..])
}

/// Parses a comma-separated table whose header names all 14 columns
/// (13 features plus `MEDV`) in any order. Extra columns are ignored.
pub fn parse_csv<T: Scalar, R: Read>(reader: R) -> Result<Dataset<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Data(format!("cannot read header row: {e}")))?
        .clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Data(format!("missing column '{name}' in header")))
    };
    let mut columns = Vec::with_capacity(FEATURE_COUNT + 1);
    for name in FEATURE_NAMES.iter().chain(std::iter::once(&TARGET_NAME)) {
        columns.push((*name, find(name)?));
    }

    let mut features = Vec::new();
    let mut targets = Vec::new();
    let mut row = 0usize;
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Data(format!("malformed CSV: {e}")))?;
        row += 1;
        let line = record.position().map_or(row + 1, |p| p.line() as usize);
        if record.len() != headers.len() {
            return Err(Error::Data(format!(
                "row {row} (line {line}) has {} fields, header has {}",
                record.len(),
                headers.len()
            )));
        }
        for (k, (name, idx)) in columns.iter().enumerate() {
            let cell = &record[*idx];
            let v: f64 = cell.parse().map_err(|_| {
                Error::Data(format!("row {row} (line {line}), column {name}: cannot parse '{cell}' as a number"))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!("row {row} (line {line}), column {name}: value {v} is not finite")));
            }
            if k == CHAS_INDEX && v != 0.0 && v != 1.0 {
                return Err(Error::Data(format!("row {row} (line {line}), column CHAS: expected 0 or 1, got {v}")));
            }
            if k < FEATURE_COUNT {
                features.push(T::lit(v));
            } else {
                targets.push(T::lit(v));
            }
        }
    }
    if row == 0 {
        return Err(Error::Data("CSV has a header but no data rows".into()));
    }
    Dataset::new(
        Matrix::new(row, FEATURE_COUNT, features)?,
        Matrix::new(row, 1, targets)?,
        (0..row).collect(),
    )
}

/// Writes `d` with the canonical header; values use the shortest decimal
/// form that parses back to the same number.
pub fn write_csv<T: Scalar>(d: &Dataset<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    out.push_str(&FEATURE_NAMES.join(","));
    out.push(',');
    out.push_str(TARGET_NAME);
    out.push('\n');
    for r in 0..d.len() {
        for v in d.features.row(r) {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{}\n", d.targets.get(r, 0)));
    }
    File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Shuffles row positions with a ChaCha8 stream seeded by `seed` and puts the
/// first `n_train` into the training partition.
pub fn train_test_split<T: Scalar>(d: &Dataset<T>, seed: u64, n_train: usize) -> Result<(Dataset<T>, Dataset<T>)> {
    if n_train >= d.len() {
        return Err(Error::Config(format!(
            "n_train must be smaller than the dataset ({} rows), got {n_train}",
            d.len()
        )));
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((d.select(&order[..n_train])?, d.select(&order[n_train..])?))
}

/// Holds out the last `floor(fraction * n)` rows, in their current order.
pub fn validation_split<T: Scalar>(d: &Dataset<T>, fraction: f64) -> Result<(Dataset<T>, Dataset<T>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("validation fraction must be in [0,1), got {fraction}")));
    }
    let n_val = (fraction * d.len() as f64).floor() as usize;
    let cut = d.len() - n_val;
    let fit: Vec<usize> = (0..cut).collect();
    let val: Vec<usize> = (cut..d.len()).collect();
    Ok((d.select(&fit)?, d.select(&val)?))
}

/// Per-feature mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer<T = f64> {
    pub mu: Matrix<T>,
    pub sigma: Matrix<T>,
    pub sigma_floor: T,
}

pub fn fit_normalizer<T: Scalar>(x: &Matrix<T>) -> Result<Normalizer<T>> {
    Normalizer::fit(x, T::lit(DEFAULT_SIGMA_FLOOR))
}

impl<T: Scalar> Normalizer<T> {
    /// Columns whose deviation falls below `sigma_floor` get `sigma = 1`, so
    /// a constant feature maps to all zeros.
    pub fn fit(x: &Matrix<T>, sigma_floor: T) -> Result<Self> {
        if x.rows() < 2 {
            return Err(Error::Data(format!(
                "normalizer needs at least 2 rows, got {}",
                x.rows()
            )));
        }
        let n = T::lit(x.rows() as f64);
        let mu = x.sum_rows().scale(T::one() / n);
        let mut sigma = Matrix::zeros(1, x.cols());
        for c in 0..x.cols() {
            let mut ss = T::zero();
            for r in 0..x.rows() {
                let d = x.get(r, c) - mu.get(0, c);
                ss += d * d;
            }
            let s = (ss / n).sqrt();
            sigma.set(0, c, if s < sigma_floor { T::one() } else { s });
        }
        Ok(Self { mu, sigma, sigma_floor })
    }

    pub fn transform(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.mu.cols() {
            return Err(Error::Shape(format!(
                "normalizer fitted on {} columns, got {}x{}",
                self.mu.cols(),
                x.rows(),
                x.cols()
            )));
        }
        if x.rows() == 0 {
            return Ok(x.clone());
        }
        let mut out = elementwise(x, &self.mu, ElementwiseOp::Sub)?;
        for r in 0..x.rows() {
            for c in 0..x.cols() {
                out.set(r, c, out.get(r, c) / self.sigma.get(0, c));
            }
        }
        Ok(out)
    }
}

/// Training (fit), validation and test partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset<T = f64> {
    pub train: Dataset<T>,
    pub validation: Dataset<T>,
    pub test: Dataset<T>,
    pub seed: u64,
}

impl<T: Scalar> SplitDataset<T> {
    pub fn new(d: &Dataset<T>, seed: u64, n_train: usize, validation_fraction: f64) -> Result<Self> {
        let (train, test) = train_test_split(d, seed, n_train)?;
        let (train, validation) = validation_split(&train, validation_fraction)?;
        Ok(Self {
            train,
            validation,
            test,
            seed,
        })
    }

    /// Training rows including the validation holdout, in split order.
    pub fn full_train(&self) -> Result<Dataset<T>> {
        self.train.append(&self.validation)
    }

    /// Fits a normalizer on the full training partition and applies it to
    /// every partition.
    pub fn normalize(&self) -> Result<(Self, Normalizer<T>)> {
        let nz = fit_normalizer(&self.full_train()?.features)?;
        let split = Self {
            train: self.train.normalized(&nz)?,
            validation: self.validation.normalized(&nz)?,
            test: self.test.normalized(&nz)?,
            seed: self.seed,
        };
        Ok((split, nz))
    }
}
