//! Evaluation: aggregate error metrics, the prediction-error CDF and the
//! five-way bias classification of branches.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::model::{loss, LossKind};

/// Errors are compared against integer CDF buckets with this slack so that
/// values like `100 * |0.7 - 0.6|` land in bucket 10.
const CDF_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no examples to evaluate")]
    EmptyInput,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("value {value} at index {index} is not a probability")]
    NotAProbability { index: usize, value: f64 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub rmse: f64,
    pub mae: f64,
    pub mean_cross_entropy: f64,
    /// Fraction of branches where this predictor is strictly closer to the
    /// label than the other one, with ties split evenly.
    pub closeness: f64,
    pub n: usize,
}

fn check_inputs(vectors: &[&[f64]]) -> Result<usize, EvalError> {
    let n = vectors[0].len();
    for v in &vectors[1..] {
        if v.len() != n {
            return Err(EvalError::LengthMismatch(n, v.len()));
        }
    }
    if n == 0 {
        return Err(EvalError::EmptyInput);
    }
    for v in vectors {
        if let Some((index, &value)) = v.iter().enumerate().find(|(_, x)| !(0.0..=1.0).contains(*x)) {
            return Err(EvalError::NotAProbability { index, value });
        }
    }
    Ok(n)
}

fn basic_metrics(preds: &[f64], labels: &[f64]) -> (f64, f64, f64) {
    let n = preds.len() as f64;
    let (mut se, mut ae, mut ce) = (0.0, 0.0, 0.0);
    for (&p, &y) in preds.iter().zip(labels) {
        se += (p - y) * (p - y);
        ae += (p - y).abs();
        ce += loss(LossKind::CrossEntropy, p, y);
    }
    ((se / n).sqrt(), ae / n, ce / n)
}

/// Metrics for the learned predictor and the heuristic, in that order.
pub fn compute_metrics(
    predictions: &[f64],
    heuristic: &[f64],
    labels: &[f64],
) -> Result<(MetricsReport, MetricsReport), EvalError> {
    let n = check_inputs(&[predictions, heuristic, labels])?;
    let (mut wins, mut losses) = (0usize, 0usize);
    for i in 0..n {
        let a = (predictions[i] - labels[i]).abs();
        let b = (heuristic[i] - labels[i]).abs();
        if a < b {
            wins += 1;
        } else if b < a {
            losses += 1;
        }
    }
    let ties = n - wins - losses;
    // Compute the larger share by division; the smaller one is then an exact
    // floating-point complement, so the two always sum to 1.
    let share = |k: usize| (k as f64 + 0.5 * ties as f64) / n as f64;
    let (ml_close, heur_close) = if wins >= losses {
        let s = share(wins);
        (s, 1.0 - s)
    } else {
        let s = share(losses);
        (1.0 - s, s)
    };

    let report = |preds: &[f64], closeness| {
        let (rmse, mae, mean_cross_entropy) = basic_metrics(preds, labels);
        MetricsReport {
            rmse,
            mae,
            mean_cross_entropy,
            closeness,
            n,
        }
    };
    Ok((report(predictions, ml_close), report(heuristic, heur_close)))
}

/// `buckets[k]` is the percentage of branches whose prediction error,
/// `100 * |p - y|`, is at most `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCdf {
    pub buckets: [f64; 101],
}

pub fn error_cdf(predictions: &[f64], labels: &[f64]) -> Result<ErrorCdf, EvalError> {
    let n = check_inputs(&[predictions, labels])?;
    let mut counts = [0usize; 101];
    for (&p, &y) in predictions.iter().zip(labels) {
        let err = 100.0 * (p - y).abs();
        let first = (err - CDF_SLACK).ceil().max(0.0) as usize;
        if first <= 100 {
            counts[first] += 1;
        }
    }
    let mut buckets = [0.0; 101];
    let mut running = 0usize;
    for k in 0..=100 {
        running += counts[k];
        buckets[k] = 100.0 * running as f64 / n as f64;
    }
    Ok(ErrorCdf { buckets })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BranchCategory {
    StronglyNotTaken,
    WeaklyNotTaken,
    Unbiased,
    WeaklyTaken,
    StronglyTaken,
}

impl BranchCategory {
    pub const ALL: [BranchCategory; 5] = [
        BranchCategory::StronglyNotTaken,
        BranchCategory::WeaklyNotTaken,
        BranchCategory::Unbiased,
        BranchCategory::WeaklyTaken,
        BranchCategory::StronglyTaken,
    ];

    pub fn abbrev(self) -> &'static str {
        match self {
            BranchCategory::StronglyNotTaken => "SNT",
            BranchCategory::WeaklyNotTaken => "WNT",
            BranchCategory::Unbiased => "UB",
            BranchCategory::WeaklyTaken => "WT",
            BranchCategory::StronglyTaken => "ST",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Category boundaries. Unbiased is closed on both ends; the weak classes
/// are closed on the side facing the middle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategoryThresholds {
    /// Below this: strongly not taken.
    pub strong_not_taken: f64,
    /// Below this: weakly not taken.
    pub unbiased_low: f64,
    /// At most this: unbiased.
    pub unbiased_high: f64,
    /// At most this: weakly taken; above it strongly taken.
    pub strong_taken: f64,
}

impl Default for CategoryThresholds {
    fn default() -> Self {
        CategoryThresholds {
            strong_not_taken: 0.1,
            unbiased_low: 0.45,
            unbiased_high: 0.55,
            strong_taken: 0.9,
        }
    }
}

pub fn categorize(p: f64) -> BranchCategory {
    categorize_with(p, &CategoryThresholds::default())
}

pub fn categorize_with(p: f64, t: &CategoryThresholds) -> BranchCategory {
    if p < t.strong_not_taken {
        BranchCategory::StronglyNotTaken
    } else if p < t.unbiased_low {
        BranchCategory::WeaklyNotTaken
    } else if p <= t.unbiased_high {
        BranchCategory::Unbiased
    } else if p <= t.strong_taken {
        BranchCategory::WeaklyTaken
    } else {
        BranchCategory::StronglyTaken
    }
}

/// Rows are the heuristic's category, columns the label's. Each nonempty
/// row is normalized to percentages.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryBreakdown {
    pub counts: [[usize; 5]; 5],
    pub percent: [[f64; 5]; 5],
}

impl CategoryBreakdown {
    pub fn row_total(&self, row: BranchCategory) -> usize {
        self.counts[row.index()].iter().sum()
    }

    pub fn get(&self, row: BranchCategory, col: BranchCategory) -> f64 {
        self.percent[row.index()][col.index()]
    }
}

pub fn category_breakdown(heuristic: &[f64], labels: &[f64]) -> Result<CategoryBreakdown, EvalError> {
    category_breakdown_with(heuristic, labels, &CategoryThresholds::default())
}

pub fn category_breakdown_with(
    heuristic: &[f64],
    labels: &[f64],
    t: &CategoryThresholds,
) -> Result<CategoryBreakdown, EvalError> {
    check_inputs(&[heuristic, labels])?;
    let mut counts = [[0usize; 5]; 5];
    for (&h, &y) in heuristic.iter().zip(labels) {
        counts[categorize_with(h, t).index()][categorize_with(y, t).index()] += 1;
    }
    let mut percent = [[0.0; 5]; 5];
    for (row, out) in counts.iter().zip(percent.iter_mut()) {
        let total: usize = row.iter().sum();
        if total > 0 {
            for (c, o) in row.iter().zip(out.iter_mut()) {
                *o = 100.0 * *c as f64 / total as f64;
            }
        }
    }
    Ok(CategoryBreakdown { counts, percent })
}

/// Report text: a metrics table and the heuristic-vs-label breakdown.
pub fn report_markdown(ml: &MetricsReport, heur: &MetricsReport, breakdown: &CategoryBreakdown) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Branch probability evaluation\n");
    let _ = writeln!(out, "Branches evaluated: {}\n", ml.n);
    let _ = writeln!(out, "| Predictor | RMSE | MAE | Cross entropy | Closeness |");
    let _ = writeln!(out, "|---|---|---|---|---|");
    // Round the pair once so the printed closeness values still sum to 1.
    let ml_close = (ml.closeness * 1e4).round() as u32;
    for (name, r, close) in [("ML", ml, ml_close), ("Heuristics", heur, 10_000 - ml_close)] {
        let _ = writeln!(
            out,
            "| {name} | {:.4} | {:.4} | {:.4} | {}.{:04} |",
            r.rmse,
            r.mae,
            r.mean_cross_entropy,
            close / 10_000,
            close % 10_000
        );
    }
    let _ = writeln!(out, "\n## Heuristic category vs profile category (row %)\n");
    let mut header = String::from("| Heuristic \\ Profile |");
    let mut rule = String::from("|---|");
    for c in BranchCategory::ALL {
        let _ = write!(header, " {} |", c.abbrev());
        rule.push_str("---|");
    }
    let _ = writeln!(out, "{header} Branches |\n{rule}---|");
    for r in BranchCategory::ALL {
        let _ = write!(out, "| {} |", r.abbrev());
        for c in BranchCategory::ALL {
            let _ = write!(out, " {:.4} |", breakdown.get(r, c));
        }
        let _ = writeln!(out, " {} |", breakdown.row_total(r));
    }
    out
}

pub fn cdf_csv(ml: &ErrorCdf, heur: &ErrorCdf) -> String {
    let mut out = String::from("error,ml_pct,heur_pct\n");
    for k in 0..=100 {
        let _ = writeln!(out, "{k},{:.4},{:.4}", ml.buckets[k], heur.buckets[k]);
    }
    out
}

/// Writes `report.md` and `cdf.csv` into `dir`.
pub fn render_report(
    ml: &MetricsReport,
    heur: &MetricsReport,
    ml_cdf: &ErrorCdf,
    heur_cdf: &ErrorCdf,
    breakdown: &CategoryBreakdown,
    dir: &Path,
) -> Result<(), EvalError> {
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })
    };
    write("report.md", report_markdown(ml, heur, breakdown))?;
    write("cdf.csv", cdf_csv(ml_cdf, heur_cdf))
}
