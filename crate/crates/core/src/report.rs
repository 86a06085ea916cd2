//! Result artifacts: predicted-vs-actual scatter, prediction-error histogram,
//! a per-split metrics table and the algorithm comparison table. Each is a
//! CSV file, and the two plots also get a small standalone SVG.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{EvalPair, MetricsReport};
use crate::scalar::Scalar;

pub const DEFAULT_BINS: usize = 25;

const SVG_SIZE: f64 = 480.0;
const MARGIN: f64 = 64.0;
const PLOT: f64 = SVG_SIZE - 2.0 * MARGIN;

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{w}" viewBox="0 0 {w} {w}">"#,
        w = SVG_SIZE
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{w}" fill="white"/>"#, w = SVG_SIZE);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="28" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
        SVG_SIZE / 2.0,
        xml_escape(title)
    );
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn axes(s: &mut String, x_label: &str, y_label: &str) {
    let (x0, y0, x1, y1) = (MARGIN, MARGIN, MARGIN + PLOT, MARGIN + PLOT);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        MARGIN + PLOT / 2.0,
        SVG_SIZE - 18.0,
        xml_escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{c}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 18 {c})">{}</text>"#,
        xml_escape(y_label),
        c = MARGIN + PLOT / 2.0
    );
}

fn tick_label(s: &mut String, x: f64, y: f64, anchor: &str, value: f64) {
    let _ = writeln!(
        s,
        r#"<text x="{x:.2}" y="{y:.2}" font-family="sans-serif" font-size="10" text-anchor="{anchor}">{value:.1}</text>"#
    );
}

/// Shared axis range for both coordinates, padded by 5%.
fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if hi > lo {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        (lo - 1.0, hi + 1.0)
    }
}

fn require_rows<T: Scalar>(p: &EvalPair<'_, T>) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Data("report needs at least one sample".into()));
    }
    Ok(())
}

/// Writes `true,predicted` rows and a square scatter plot with the `y = x`
/// reference line.
pub fn regression_scatter<T: Scalar>(p: &EvalPair<'_, T>, csv_path: impl AsRef<Path>, svg_path: impl AsRef<Path>) -> Result<()> {
    require_rows(p)?;
    let actual = p.actual().as_slice();
    let predicted = p.predicted().as_slice();

    let mut csv = String::from("true,predicted\n");
    for (a, y) in actual.iter().zip(predicted) {
        let _ = writeln!(csv, "{},{:.6}", a.as_f64(), y.as_f64());
    }
    write_file(csv_path.as_ref(), &csv)?;

    let (lo, hi) = padded_range(actual.iter().chain(predicted).map(|v| v.as_f64()));
    let frac = |v: f64| (v - lo) / (hi - lo);
    let px = |v: f64| MARGIN + frac(v) * PLOT;
    let py = |v: f64| MARGIN + PLOT - frac(v) * PLOT;

    let mut svg = svg_open("Predicted vs actual");
    axes(&mut svg, "Actual value ($1000s)", "Predicted value ($1000s)");
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        tick_label(&mut svg, px(v), MARGIN + PLOT + 16.0, "middle", v);
        tick_label(&mut svg, MARGIN - 6.0, py(v) + 4.0, "end", v);
    }
    let _ = writeln!(
        svg,
        r##"<line class="diagonal" x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}" stroke="#888" stroke-dasharray="4 3"/>"##,
        px(lo),
        py(lo),
        px(hi),
        py(hi)
    );
    for (a, y) in actual.iter().zip(predicted) {
        let _ = writeln!(
            svg,
            r##"<circle cx="{:.3}" cy="{:.3}" r="3" fill="#1f77b4" fill-opacity="0.7"/>"##,
            px(a.as_f64()),
            py(y.as_f64())
        );
    }
    svg.push_str("</svg>\n");
    write_file(svg_path.as_ref(), &svg)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramBin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
}

/// Equal-width bins over `[min, max]` of `predicted - actual`. The last bin
/// is closed on the right. A zero spread gives a single bin.
pub fn histogram_bins(errors: &[f64], bins: usize) -> Result<Vec<HistogramBin>> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    if errors.is_empty() {
        return Err(Error::Data("histogram needs at least one value".into()));
    }
    let lo = errors.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Ok(vec![HistogramBin {
            low: lo,
            high: hi,
            count: errors.len(),
        }]);
    }
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            low: lo + width * i as f64,
            high: if i + 1 == bins { hi } else { lo + width * (i + 1) as f64 },
            count: 0,
        })
        .collect();
    for &e in errors {
        let i = (((e - lo) / width).floor() as usize).min(bins - 1);
        out[i].count += 1;
    }
    Ok(out)
}

pub fn error_histogram<T: Scalar>(
    p: &EvalPair<'_, T>,
    bins: usize,
    csv_path: impl AsRef<Path>,
    svg_path: impl AsRef<Path>,
) -> Result<Vec<HistogramBin>> {
    require_rows(p)?;
    let errors: Vec<f64> = p
        .actual()
        .as_slice()
        .iter()
        .zip(p.predicted().as_slice())
        .map(|(a, y)| y.as_f64() - a.as_f64())
        .collect();
    let hist = histogram_bins(&errors, bins)?;

    let mut csv = String::from("# error = predicted - actual, in $1000s; positive means overprediction\n");
    csv.push_str("bin_low,bin_high,count\n");
    for b in &hist {
        let _ = writeln!(csv, "{},{},{}", b.low, b.high, b.count);
    }
    write_file(csv_path.as_ref(), &csv)?;

    let max_count = hist.iter().map(|b| b.count).max().unwrap_or(1).max(1) as f64;
    let bar_w = PLOT / hist.len() as f64;
    let mut svg = svg_open("Prediction error");
    axes(&mut svg, "Error, predicted - actual ($1000s)", "Count");
    tick_label(&mut svg, MARGIN, MARGIN + PLOT + 16.0, "middle", hist[0].low);
    tick_label(&mut svg, MARGIN + PLOT, MARGIN + PLOT + 16.0, "middle", hist[hist.len() - 1].high);
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="end">{}</text>"#,
        MARGIN - 6.0,
        MARGIN + 4.0,
        max_count
    );
    for (i, b) in hist.iter().enumerate() {
        let h = b.count as f64 / max_count * PLOT;
        let _ = writeln!(
            svg,
            r##"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="#ff7f0e" stroke="white"/>"##,
            MARGIN + bar_w * i as f64,
            MARGIN + PLOT - h,
            bar_w,
            h
        );
    }
    svg.push_str("</svg>\n");
    write_file(svg_path.as_ref(), &svg)?;
    Ok(hist)
}

/// One row per named split: `split,r2,mae,mse,rmse`.
pub fn metrics_table<T: Scalar>(rows: &[(&str, MetricsReport<T>)], out_path: impl AsRef<Path>) -> Result<()> {
    let mut csv = String::from("split,r2,mae,mse,rmse\n");
    for (name, m) in rows {
        let _ = writeln!(
            csv,
            "{name},{},{},{},{}",
            m.r2.as_f64(),
            m.mae.as_f64(),
            m.mse.as_f64(),
            m.rmse.as_f64()
        );
    }
    write_file(out_path.as_ref(), &csv)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    /// Measured in this process.
    Computed,
    /// Reference figure carried over from the published comparison.
    Published,
}

impl Source {
    pub fn label(self) -> &'static str {
        match self {
            Source::Computed => "computed",
            Source::Published => "published",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub name: String,
    pub r2: f64,
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    pub source: Source,
}

impl ComparisonRow {
    pub fn computed<T: Scalar>(name: &str, m: &MetricsReport<T>) -> Self {
        Self {
            name: name.to_string(),
            r2: m.r2.as_f64(),
            mse: m.mse.as_f64(),
            rmse: m.rmse.as_f64(),
            mae: m.mae.as_f64(),
            source: Source::Computed,
        }
    }
}

/// Reference rows as `(name, r2, mse, rmse, mae)`.
pub const PUBLISHED_ROWS: [(&str, f64, f64, f64, f64); 5] = [
    ("ANN", 0.87, 10.18, 3.19, 2.10),
    ("XGBoost", 0.84, 15.71, 2.45, 2.45),
    ("Random Forest", 0.83, 17.44, 4.17, 2.56),
    ("Linear Regression", 0.71, 30.05, 5.48, 3.85),
    ("SVM", 0.59, 42.81, 6.54, 3.75),
];

const XGBOOST_NOTE: &str = "XGBoost row reproduced as published: its RMSE 2.45 is inconsistent with MSE 15.71 (sqrt = 3.96)";

pub fn published_rows() -> Vec<ComparisonRow> {
    PUBLISHED_ROWS
        .iter()
        .map(|&(name, r2, mse, rmse, mae)| ComparisonRow {
            name: name.to_string(),
            r2,
            mse,
            rmse,
            mae,
            source: Source::Published,
        })
        .collect()
}

/// Merges `computed` with the published rows, sorts by descending R² (stable,
/// so ties keep computed rows first) and writes
/// `algorithm,r2,mse,rmse,mae,source` plus trailing `#` notes.
pub fn comparison_table(computed: &[ComparisonRow], out_path: impl AsRef<Path>) -> Result<Vec<ComparisonRow>> {
    if computed.is_empty() {
        return Err(Error::Data("comparison needs at least one computed row".into()));
    }
    if let Some(r) = computed.iter().find(|r| r.source != Source::Computed) {
        return Err(Error::Data(format!("row '{}' is not a computed row", r.name)));
    }
    if let Some(r) = computed.iter().find(|r| r.name.contains([',', '"', '\n'])) {
        return Err(Error::Data(format!("row name '{}' cannot be written to CSV", r.name)));
    }
    let mut rows: Vec<ComparisonRow> = computed.to_vec();
    rows.extend(published_rows());
    rows.sort_by(|a, b| b.r2.total_cmp(&a.r2));

    let mut csv = String::from("algorithm,r2,mse,rmse,mae,source\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.name,
            r.r2,
            r.mse,
            r.rmse,
            r.mae,
            r.source.label()
        );
    }
    let _ = writeln!(csv, "# {XGBOOST_NOTE}");
    write_file(out_path.as_ref(), &csv)?;
    Ok(rows)
}

/// Reads any CSV written by this module: `#` lines are skipped and the first
/// remaining line is the header.
pub fn read_csv_table(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let header = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

pub fn read_comparison_table(path: impl AsRef<Path>) -> Result<Vec<ComparisonRow>> {
    let (header, rows) = read_csv_table(&path)?;
    if header != ["algorithm", "r2", "mse", "rmse", "mae", "source"] {
        return Err(Error::Data(format!("unexpected comparison header {header:?}")));
    }
    rows.into_iter()
        .map(|r| {
            let num = |i: usize| {
                r[i].parse::<f64>()
                    .map_err(|_| Error::Data(format!("row '{}': cannot parse '{}'", r[0], r[i])))
            };
            let source = match r[5].as_str() {
                "computed" => Source::Computed,
                "published" => Source::Published,
                other => return Err(Error::Data(format!("unknown source '{other}'"))),
            };
            Ok(ComparisonRow {
                name: r[0].clone(),
                r2: num(1)?,
                mse: num(2)?,
                rmse: num(3)?,
                mae: num(4)?,
                source,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn col(v: &[f64]) -> Matrix {
        Matrix::column(v).unwrap()
    }

    fn attr(tag: &str, name: &str) -> f64 {
        let key = format!("{name}=\"");
        let start = tag.find(&key).unwrap() + key.len();
        let end = start + tag[start..].find('"').unwrap();
        tag[start..end].parse().unwrap()
    }

    #[test]
    fn scatter_csv_format_and_diagonal() {
        let dir = tempfile::tempdir().unwrap();
        let (c, s) = (dir.path().join("s.csv"), dir.path().join("s.svg"));
        let y = col(&[18.9, 13.9, 50.0, 5.0]);
        let yh = col(&[18.396809, 14.8146731, 48.0, 7.25]);
        regression_scatter(&EvalPair::new(&y, &yh).unwrap(), &c, &s).unwrap();
        let text = fs::read_to_string(&c).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "true,predicted");
        assert_eq!(lines[1], "18.9,18.396809");
        assert_eq!(lines[2], "13.9,14.814673");
        assert_eq!(lines.len(), 5);

        regression_scatter(&EvalPair::new(&y, &y).unwrap(), &c, &s).unwrap();
        let svg = fs::read_to_string(&s).unwrap();
        let circles: Vec<&str> = svg.lines().filter(|l| l.starts_with("<circle")).collect();
        assert_eq!(circles.len(), 4);
        for c in circles {
            let (cx, cy) = (attr(c, "cx"), attr(c, "cy"));
            // on the diagonal from (MARGIN, MARGIN+PLOT) to (MARGIN+PLOT, MARGIN)
            assert!(((cx - MARGIN) - (MARGIN + PLOT - cy)).abs() < 2e-3, "{c}");
        }
        assert!(svg.contains("$1000s"));
        assert!(!svg.contains("href"));
    }

    #[test]
    fn histogram_bins_conserve_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1usize, 2, 7, 101, 500] {
            let e: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let h = histogram_bins(&e, DEFAULT_BINS).unwrap();
            assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), n);
            if n > 1 {
                assert_eq!(h.len(), DEFAULT_BINS);
                for w in h.windows(2) {
                    assert_eq!(w[0].high, w[1].low);
                }
            }
        }
        let flat = histogram_bins(&[0.0; 9], DEFAULT_BINS).unwrap();
        assert_eq!(flat, vec![HistogramBin { low: 0.0, high: 0.0, count: 9 }]);
        assert!(histogram_bins(&[1.0], 0).is_err());
    }

    #[test]
    fn histogram_files() {
        let dir = tempfile::tempdir().unwrap();
        let (c, s) = (dir.path().join("h.csv"), dir.path().join("h.svg"));
        let y = col(&[1.0, 2.0, 3.0, 4.0]);
        let yh = col(&[1.5, 2.0, 2.0, 4.0]);
        let bins = error_histogram(&EvalPair::new(&y, &yh).unwrap(), 4, &c, &s).unwrap();
        assert_eq!(bins.len(), 4);
        // errors are -1, 0, 0, 0.5
        assert_eq!(bins.iter().map(|b| b.count).collect::<Vec<_>>(), vec![1, 0, 2, 1]);
        let (header, rows) = read_csv_table(&c).unwrap();
        assert_eq!(header, ["bin_low", "bin_high", "count"]);
        assert_eq!(rows.len(), 4);
        assert!(fs::read_to_string(&c).unwrap().starts_with("# error = predicted - actual"));
        let svg = fs::read_to_string(&s).unwrap();
        assert_eq!(svg.matches("<rect").count(), 1 + 4);
    }

    #[test]
    fn published_rows_sort_order() {
        let names: Vec<String> = {
            let mut r = published_rows();
            r.sort_by(|a, b| b.r2.total_cmp(&a.r2));
            r.into_iter().map(|r| r.name).collect()
        };
        assert_eq!(names, ["ANN", "XGBoost", "Random Forest", "Linear Regression", "SVM"]);
    }

    #[test]
    fn comparison_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cmp.csv");
        let ours = ComparisonRow {
            name: "Multi-level NN".into(),
            r2: 0.8912345678,
            mse: 9.5,
            rmse: 9.5f64.sqrt(),
            mae: 2.2,
            source: Source::Computed,
        };
        let rows = comparison_table(std::slice::from_ref(&ours), &p).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0], ours);
        assert_eq!(rows[1], published_rows()[0]);
        assert_eq!(read_comparison_table(&p).unwrap(), rows);
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("XGBoost,0.84,15.71,2.45,2.45,published"));
        assert!(text.contains("SVM,0.59,42.81,6.54,3.75,published"));
        assert!(text.lines().last().unwrap().starts_with("# XGBoost"));

        assert!(comparison_table(&[], &p).is_err());
        let mut fake = ours.clone();
        fake.source = Source::Published;
        assert!(comparison_table(&[fake], &p).is_err());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let y = col(&[1.0, 2.0]);
        let p = EvalPair::new(&y, &y).unwrap();
        let err = regression_scatter(&p, "/nonexistent/dir/a.csv", "/nonexistent/dir/a.svg").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
