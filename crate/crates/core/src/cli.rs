//! Command-line front end.
//!
//! Exit codes: 0 success, 1 domain error (message on stderr), 2 usage error
//! (usage on stderr).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::baseline::ols_fit_predict;
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::data::{load_csv, Dataset, SplitDataset, DEFAULT_TRAIN_ROWS};
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::metrics::{EvalPair, MetricsReport};
use crate::modelspec::{parse_spec, ArchitectureSpec};
use crate::report::{comparison_table, error_histogram, metrics_table, regression_scatter, ComparisonRow, DEFAULT_BINS};
use crate::tensor::Matrix;
use crate::train::{evaluate, grad_check, train_loop, TrainConfig};

/// `println!` that tolerates a closed stdout (e.g. output piped into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

pub const SEED_ENV: &str = "MLDNN_SEED";
pub const CHECKPOINT_FILE: &str = "checkpoint.mldnn";
pub const HISTORY_FILE: &str = "history.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";

const GRADCHECK_ROWS: usize = 4;
const GRADCHECK_H: f64 = 1e-5;
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "mldnn", version, about = "Multi-level dense network for housing-price regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network and write checkpoint, history and manifest to --out.
    Train(TrainArgs),
    /// Score a checkpoint on the training and test partitions.
    Eval(EvalArgs),
    /// Write the algorithm comparison table.
    Compare(CompareArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Parse and validate an architecture file.
    SpecValidate(SpecValidateArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Housing CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Architecture file; the reference network when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    validation_fraction: Option<f64>,
    /// Rows in the training partition; the rest are test rows.
    #[arg(long)]
    n_train: Option<usize>,
    /// key=value file, e.g. a previous run's manifest.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Write scatter, histogram and metrics artifacts here.
    #[arg(long)]
    report_dir: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct SpecValidateArgs {
    file: PathBuf,
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::SpecValidate(a) => cmd_spec_validate(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Fully resolved training settings, as recorded in the manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub data: PathBuf,
    pub dataset_sha256: String,
    /// Architecture file, or `None` for the reference network.
    pub spec: Option<PathBuf>,
    pub n_train: usize,
    pub config: TrainConfig,
    pub checkpoint: String,
    pub history: String,
}

impl RunManifest {
    pub fn render(&self) -> String {
        let c = &self.config;
        let spec = self.spec.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "default".into());
        format!(
            "data={}\ndataset_sha256={}\nspec={spec}\nseed={}\nepochs={}\nbatch_size={}\nlearning_rate={:?}\n\
             validation_fraction={:?}\nshuffle_each_epoch={}\nn_train={}\ncheckpoint={}\nhistory={}\n",
            self.data.display(),
            self.dataset_sha256,
            c.seed,
            c.epochs,
            c.batch_size,
            c.learning_rate,
            c.validation_fraction,
            c.shuffle_each_epoch,
            self.n_train,
            self.checkpoint,
            self.history,
        )
    }
}

/// Parses a flat `key=value` file. Blank lines and `#` comments are ignored.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, found '{line}'", i + 1)))?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key '{}'", i + 1, k.trim())));
        }
    }
    Ok(out)
}

fn parse_value<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse().map_err(|_| Error::Config(format!("cannot parse {key}='{v}'")))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Settings from a config file, before flags and defaults are applied.
#[derive(Debug, Default)]
struct FileConfig {
    data: Option<PathBuf>,
    spec: Option<Option<PathBuf>>,
    seed: Option<u64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    validation_fraction: Option<f64>,
    shuffle_each_epoch: Option<bool>,
    n_train: Option<usize>,
    dataset_sha256: Option<String>,
}

fn read_config(path: &Path) -> Result<FileConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut fc = FileConfig::default();
    for (k, v) in parse_key_values(&text)? {
        match k.as_str() {
            "data" => fc.data = Some(PathBuf::from(v)),
            "spec" => fc.spec = Some(if v == "default" { None } else { Some(PathBuf::from(v)) }),
            "seed" => fc.seed = Some(parse_value(&k, &v)?),
            "epochs" => fc.epochs = Some(parse_value(&k, &v)?),
            "batch_size" => fc.batch_size = Some(parse_value(&k, &v)?),
            "learning_rate" => fc.learning_rate = Some(parse_value(&k, &v)?),
            "validation_fraction" => fc.validation_fraction = Some(parse_value(&k, &v)?),
            "shuffle_each_epoch" => fc.shuffle_each_epoch = Some(parse_value(&k, &v)?),
            "n_train" => fc.n_train = Some(parse_value(&k, &v)?),
            "dataset_sha256" => fc.dataset_sha256 = Some(v),
            // artifact names written by a previous run
            "checkpoint" | "history" => {}
            _ => return Err(Error::Config(format!("{}: unknown key '{k}'", path.display()))),
        }
    }
    Ok(fc)
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(parse_value(SEED_ENV, v.trim())?)),
        Err(_) => Ok(None),
    }
}

/// Precedence: flag, then config file, then (seed only) the environment,
/// then built-in defaults.
fn resolve(a: &TrainArgs) -> Result<(RunManifest, Option<String>)> {
    let fc = match &a.config {
        Some(p) => read_config(p)?,
        None => FileConfig::default(),
    };
    let d = TrainConfig::default();
    let data = a
        .data
        .clone()
        .or(fc.data)
        .ok_or_else(|| Error::Config("no dataset given (use --data or a config file)".into()))?;
    let seed = match a.seed.or(fc.seed) {
        Some(s) => s,
        None => env_seed()?.unwrap_or(d.seed),
    };
    let config = TrainConfig {
        epochs: a.epochs.or(fc.epochs).unwrap_or(d.epochs),
        learning_rate: a.lr.or(fc.learning_rate).unwrap_or(d.learning_rate),
        batch_size: a.batch_size.or(fc.batch_size).unwrap_or(d.batch_size),
        validation_fraction: a.validation_fraction.or(fc.validation_fraction).unwrap_or(d.validation_fraction),
        seed,
        shuffle_each_epoch: fc.shuffle_each_epoch.unwrap_or(d.shuffle_each_epoch),
    };
    config.validate()?;
    let manifest = RunManifest {
        data,
        dataset_sha256: String::new(),
        spec: a.spec.clone().or(fc.spec.flatten()),
        n_train: a.n_train.or(fc.n_train).unwrap_or(DEFAULT_TRAIN_ROWS),
        config,
        checkpoint: CHECKPOINT_FILE.into(),
        history: HISTORY_FILE.into(),
    };
    Ok((manifest, fc.dataset_sha256))
}

fn load_architecture(spec: Option<&Path>) -> Result<ArchitectureSpec> {
    match spec {
        None => Ok(ArchitectureSpec::canonical()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(parse_spec(&text)?)
        }
    }
}

fn print_metrics(rows: &[(&str, MetricsReport)]) {
    say!("{:<10} {:>8} {:>8} {:>9} {:>8}", "split", "r2", "mae", "mse", "rmse");
    for (name, m) in rows {
        say!("{name:<10} {:>8.4} {:>8.4} {:>9.4} {:>8.4}", m.r2, m.mae, m.mse, m.rmse);
    }
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let (mut manifest, expected_sha) = resolve(&a)?;
    manifest.dataset_sha256 = sha256_file(&manifest.data)?;
    if let Some(want) = expected_sha {
        if want != manifest.dataset_sha256 {
            return Err(Error::Data(format!(
                "{} has sha256 {}, but the config expects {want}",
                manifest.data.display(),
                manifest.dataset_sha256
            )));
        }
    }
    let cfg = manifest.config;
    let data: Dataset = load_csv(&manifest.data)?;
    let split = SplitDataset::new(&data, cfg.seed, manifest.n_train, cfg.validation_fraction)?;
    let (split, nz) = split.normalize()?;
    let arch = load_architecture(manifest.spec.as_deref())?;
    let mut graph = ModelGraph::from_spec(&arch, cfg.seed)?;

    let history = train_loop(&mut graph, &split, &cfg)?;

    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut meta = BTreeMap::new();
    meta.insert("seed".to_string(), cfg.seed.to_string());
    meta.insert("n_train".to_string(), manifest.n_train.to_string());
    meta.insert("validation_fraction".to_string(), format!("{:?}", cfg.validation_fraction));
    meta.insert("dataset_sha256".to_string(), manifest.dataset_sha256.clone());
    save_checkpoint(a.out.join(&manifest.checkpoint), &graph, Some(&nz), &meta)?;
    history.write_csv(a.out.join(&manifest.history))?;
    let mpath = a.out.join(MANIFEST_FILE);
    fs::write(&mpath, manifest.render()).map_err(|e| Error::io(&mpath, e))?;

    let last = history.records.last().expect("at least one epoch");
    say!(
        "trained {} epochs in {:.1}s: train mse {:.4}, validation mse {}",
        history.len(),
        history.duration.as_secs_f64(),
        last.train_mse,
        last.val_mse.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
    );
    say!("wrote {}", a.out.display());
    Ok(0)
}

/// Checkpoint plus the normalized split it was trained on.
struct Restored {
    graph: ModelGraph,
    split: SplitDataset,
}

fn restore(checkpoint: &Path, data_path: &Path) -> Result<Restored> {
    let Checkpoint {
        graph,
        normalizer,
        metadata,
    } = load_checkpoint::<f64>(checkpoint)?;
    let nz = normalizer.ok_or_else(|| Error::Checkpoint("checkpoint has no feature normalizer".into()))?;
    let get = |k: &str| {
        metadata
            .get(k)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint metadata lacks '{k}'")))
    };
    let seed: u64 = parse_value("seed", get("seed")?)?;
    let n_train: usize = parse_value("n_train", get("n_train")?)?;
    let fraction: f64 = parse_value("validation_fraction", get("validation_fraction")?)?;
    if let Some(want) = metadata.get("dataset_sha256") {
        let got = sha256_file(data_path)?;
        if &got != want {
            eprintln!(
                "warning: {} differs from the training data (sha256 {got}, expected {want})",
                data_path.display()
            );
        }
    }
    let data: Dataset = load_csv(data_path)?;
    let split = SplitDataset::new(&data, seed, n_train, fraction)?;
    let split = SplitDataset {
        train: split.train.normalized(&nz)?,
        validation: split.validation.normalized(&nz)?,
        test: split.test.normalized(&nz)?,
        seed,
    };
    Ok(Restored { graph, split })
}

fn cmd_eval(a: EvalArgs) -> Result<i32> {
    let r = restore(&a.checkpoint, &a.data)?;
    let full = r.split.full_train()?;
    let train = evaluate(&r.graph, &full.features, &full.targets)?;
    let test_pred = r.graph.predict(&r.split.test.features)?;
    let pair = EvalPair::new(&r.split.test.targets, &test_pred)?;
    let test = MetricsReport::compute(&pair)?;
    print_metrics(&[("train", train), ("test", test)]);

    if let Some(dir) = &a.report_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        regression_scatter(&pair, dir.join("scatter.csv"), dir.join("scatter.svg"))?;
        error_histogram(&pair, a.bins, dir.join("error_histogram.csv"), dir.join("error_histogram.svg"))?;
        metrics_table(&[("train", train), ("test", test)], dir.join("metrics.csv"))?;
        say!("wrote {}", dir.display());
    }
    Ok(0)
}

fn cmd_compare(a: CompareArgs) -> Result<i32> {
    let r = restore(&a.checkpoint, &a.data)?;
    let test = &r.split.test;
    let nn = evaluate(&r.graph, &test.features, &test.targets)?;
    let full = r.split.full_train()?;
    let (_, ols_pred) = ols_fit_predict(&full.features, &full.targets, &test.features)?;
    let ols = MetricsReport::compute(&EvalPair::new(&test.targets, &ols_pred)?)?;
    let rows = comparison_table(
        &[
            ComparisonRow::computed("Multi-level NN", &nn),
            ComparisonRow::computed("Linear Regression (OLS)", &ols),
        ],
        &a.out,
    )?;
    say!("{:<26} {:>7} {:>8} {:>7} {:>7}  source", "algorithm", "r2", "mse", "rmse", "mae");
    for row in rows {
        say!(
            "{:<26} {:>7.3} {:>8.2} {:>7.2} {:>7.2}  {}",
            row.name,
            row.r2,
            row.mse,
            row.rmse,
            row.mae,
            row.source.label()
        );
    }
    say!("wrote {}", a.out.display());
    Ok(0)
}

/// Random `rows x cols` batch in [-1, 1) for gradient checking.
pub fn gradcheck_batch(rows: usize, cols: usize, seed: u64) -> (Matrix, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let x = Matrix::new(rows, cols, draw(rows * cols)).expect("sized buffer");
    let y = Matrix::new(rows, 1, draw(rows)).expect("sized buffer");
    (x, y)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32> {
    let arch = load_architecture(a.spec.as_deref())?;
    let graph = ModelGraph::<f64>::from_spec(&arch, a.seed)?;
    let (x, y) = gradcheck_batch(GRADCHECK_ROWS, arch.input_width, a.seed);
    let rep = grad_check(&graph, &x, &y, GRADCHECK_H, GRADCHECK_TOLERANCE)?;
    say!(
        "max relative error {:.3e} in {} ({} scalars checked, tolerance {:.0e}): {}",
        rep.max_relative_error,
        rep.worst_tensor,
        rep.checked,
        GRADCHECK_TOLERANCE,
        if rep.passed { "PASS" } else { "FAIL" }
    );
    Ok(if rep.passed { 0 } else { 1 })
}

fn cmd_spec_validate(a: SpecValidateArgs) -> Result<i32> {
    let arch = load_architecture(Some(&a.file))?;
    let g = ModelGraph::<f64>::from_spec(&arch, 0)?;
    let (trainable, frozen) = g.param_count();
    say!(
        "{}: valid, {} levels, {} nodes ({} dense, {} concat), {trainable} trainable and {frozen} non-trainable parameters",
        a.file.display(),
        arch.levels.len(),
        g.nodes().len(),
        g.count_kind("dense"),
        g.count_kind("concat"),
    );
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_values() {
        let kv = parse_key_values("# run\nseed = 3\n\nepochs=10\n").unwrap();
        assert_eq!(kv.get("seed").map(String::as_str), Some("3"));
        assert_eq!(kv.len(), 2);
        assert!(parse_key_values("seed 3").is_err());
        assert!(parse_key_values("a=1\na=2").is_err());
    }

    #[test]
    fn manifest_round_trips_through_config() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest {
            data: "data/boston.csv".into(),
            dataset_sha256: "ab".repeat(32),
            spec: None,
            n_train: 405,
            config: TrainConfig { seed: 9, epochs: 12, learning_rate: 0.002, ..Default::default() },
            checkpoint: CHECKPOINT_FILE.into(),
            history: HISTORY_FILE.into(),
        };
        let p = dir.path().join("m.txt");
        fs::write(&p, m.render()).unwrap();
        let args = TrainArgs {
            data: None,
            spec: None,
            seed: None,
            epochs: Some(4),
            batch_size: None,
            lr: None,
            validation_fraction: None,
            n_train: None,
            config: Some(p),
            out: dir.path().into(),
        };
        let (resolved, sha) = resolve(&args).unwrap();
        assert_eq!(sha.as_deref(), Some(m.dataset_sha256.as_str()));
        // flag beats file
        assert_eq!(resolved.config.epochs, 4);
        assert_eq!(resolved.config.seed, 9);
        assert_eq!(resolved.config.learning_rate, 0.002);
        assert_eq!(resolved.data, m.data);
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        fs::write(&p, "epoch=3\n").unwrap();
        assert!(read_config(&p).unwrap_err().to_string().contains("unknown key 'epoch'"));
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run_command(["mldnn", "train", "--bogus"]), 2);
        assert_eq!(run_command(["mldnn", "frobnicate"]), 2);
        assert_eq!(run_command(["mldnn"]), 2);
        assert_eq!(run_command(["mldnn", "--help"]), 0);
    }
}
