use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn boston() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/boston.csv")
}

fn mldnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mldnn"))
        .args(args)
        .env_remove("MLDNN_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train(out: &Path, extra: &[&str]) -> Output {
    let data = boston();
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    mldnn(&args)
}

#[test]
fn train_writes_artifacts_and_eval_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = train(&run, &["--seed", "42", "--epochs", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["checkpoint.mldnn", "history.csv", "manifest.txt"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 4);
    let manifest = fs::read_to_string(run.join("manifest.txt")).unwrap();
    for key in ["seed=42", "epochs=3", "batch_size=32", "learning_rate=0.001", "validation_fraction=0.2", "n_train=405", "spec=default"] {
        assert!(manifest.lines().any(|l| l == key), "{key} not in\n{manifest}");
    }
    let sha = manifest.lines().find_map(|l| l.strip_prefix("dataset_sha256=")).unwrap();
    assert_eq!(sha.len(), 64);

    let reports = dir.path().join("reports");
    let ckpt = run.join("checkpoint.mldnn");
    let o = mldnn(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        boston().to_str().unwrap(),
        "--report-dir",
        reports.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("train") && text.contains("test") && text.contains("rmse"), "{text}");
    let scatter = fs::read_to_string(reports.join("scatter.csv")).unwrap();
    assert_eq!(scatter.lines().count(), 1 + 101);
    let hist = fs::read_to_string(reports.join("error_histogram.csv")).unwrap();
    let total: usize = hist
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("bin_low"))
        .map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, 101);
    for svg in ["scatter.svg", "error_histogram.svg"] {
        let s = fs::read_to_string(reports.join(svg)).unwrap();
        roxmltree::Document::parse(&s).unwrap_or_else(|e| panic!("{svg}: {e}"));
    }

    let table = dir.path().join("compare.csv");
    let o = mldnn(&[
        "compare",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        boston().to_str().unwrap(),
        "--out",
        table.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = mldnn::report::read_comparison_table(&table).unwrap();
    assert_eq!(rows.len(), 7);
    assert_eq!(rows.iter().filter(|r| r.source == mldnn::report::Source::Computed).count(), 2);
}

#[test]
fn rerun_from_manifest_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train(&a, &["--seed", "5", "--epochs", "4"]).status.success());
    let manifest = a.join("manifest.txt");
    let o = mldnn(&["train", "--config", manifest.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["checkpoint.mldnn", "history.csv", "manifest.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn seed_environment_fallback_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let data = boston();
    let run = |out: &Path, env: Option<&str>, seed: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_mldnn"));
        c.args(["train", "--data", data.to_str().unwrap(), "--epochs", "1", "--out", out.to_str().unwrap()]);
        if let Some(s) = seed {
            c.args(["--seed", s]);
        }
        match env {
            Some(v) => c.env("MLDNN_SEED", v),
            None => c.env_remove("MLDNN_SEED"),
        };
        assert!(c.output().unwrap().status.success());
        fs::read_to_string(out.join("manifest.txt")).unwrap()
    };
    assert!(run(&dir.path().join("e"), Some("77"), None).contains("seed=77\n"));
    assert!(run(&dir.path().join("f"), Some("77"), Some("3")).contains("seed=3\n"));
    assert!(run(&dir.path().join("d"), None, None).contains("seed=0\n"));
}

#[test]
fn dataset_checksum_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    assert!(train(&a, &["--epochs", "1"]).status.success());
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    let edited = dir.path().join("boston_edited.csv");
    let mut csv = fs::read_to_string(boston()).unwrap();
    csv.push('\n');
    fs::write(&edited, csv).unwrap();
    let cfg = dir.path().join("cfg.txt");
    let rewritten: String = manifest
        .lines()
        .map(|l| if l.starts_with("data=") { format!("data={}\n", edited.display()) } else { format!("{l}\n") })
        .collect();
    fs::write(&cfg, rewritten).unwrap();
    let o = mldnn(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("b").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sha256"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes() {
    let o = mldnn(&["gradcheck", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("max relative error"));
}

#[test]
fn spec_validate_reports_errors() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.arch");
    fs::write(&good, mldnn::ArchitectureSpec::canonical().render()).unwrap();
    let o = mldnn(&["spec-validate", good.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("158875 trainable"), "{}", stdout(&o));

    let bad = dir.path().join("bad.arch");
    fs::write(
        &bad,
        "input 13\nlevel 1: branches 5, units 128, relu, merge pairs\noutput: 1, linear\n",
    )
    .unwrap();
    let o = mldnn(&["spec-validate", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error"), "{}", stderr(&o));

    let o = mldnn(&["spec-validate", dir.path().join("missing").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn usage_errors() {
    let o = mldnn(&["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(mldnn(&["nonsense"]).status.code(), Some(2));
    assert_eq!(mldnn(&["eval", "--data", "x.csv"]).status.code(), Some(2));
}

#[test]
fn domain_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(&dir.path().join("r"), &["--batch-size", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("batch size"));
    let o = mldnn(&["train", "--data", "/no/such.csv", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let junk = dir.path().join("junk.mldnn");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let o = mldnn(&["eval", "--checkpoint", junk.to_str().unwrap(), "--data", boston().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("MLDNN1"));
}
