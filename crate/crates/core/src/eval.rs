//! Regression and sign-classification metrics over out-of-fold predictions,
//! and the summary report (CSV plus an aligned text table).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::ingest::Target;
use crate::train::{Experiment, OofPrediction};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {preds} predictions vs {targets} targets")]
    LengthMismatch { preds: usize, targets: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("inconsistent predictions: {0}")]
    Inconsistent(String),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("{path}: bad report row: {reason}")]
    Parse { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn check_lengths(preds: &[f64], targets: &[f64]) -> Result<()> {
    if preds.len() != targets.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            targets: targets.len(),
        });
    }
    if preds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(())
}

pub fn rmse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths(preds, targets)?;
    let sse: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / preds.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaClass {
    Improvement,
    Deterioration,
}

pub fn classify_delta(delta: f64) -> DeltaClass {
    if delta <= 0.0 {
        DeltaClass::Improvement
    } else {
        DeltaClass::Deterioration
    }
}

pub fn classification_accuracy(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths(preds, targets)?;
    let correct = preds
        .iter()
        .zip(targets)
        .filter(|(p, t)| classify_delta(**p) == classify_delta(**t))
        .count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Share of the more frequent class among `targets`.
pub fn majority_rate(targets: &[f64]) -> Result<f64> {
    if targets.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let improved = targets
        .iter()
        .filter(|t| classify_delta(**t) == DeltaClass::Improvement)
        .count();
    Ok(improved.max(targets.len() - improved) as f64 / targets.len() as f64)
}

/// For each prediction, the mean true delta of the patients outside its fold:
/// the constant predictor a training fold would fit.
pub fn mean_baseline(preds: &[OofPrediction]) -> Result<Vec<f64>> {
    if preds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let folds = preds.iter().map(|p| p.fold).max().unwrap_or(0) + 1;
    let total: f64 = preds.iter().map(|p| p.true_delta).sum();
    let mut sum = vec![0.0; folds];
    let mut count = vec![0usize; folds];
    for p in preds {
        sum[p.fold] += p.true_delta;
        count[p.fold] += 1;
    }
    preds
        .iter()
        .map(|p| {
            let n = preds.len() - count[p.fold];
            if n == 0 {
                return Err(EvalError::Inconsistent("a single fold holds every patient".into()));
            }
            Ok((total - sum[p.fold]) / n as f64)
        })
        .collect()
}

/// Table-style input size, e.g. `[50 × 1445 × 9] + [50 × 8]`.
pub fn size_label(n_patients: usize, seq: Option<(usize, usize)>, wide: bool) -> String {
    let mut parts = Vec::new();
    if let Some((len, width)) = seq {
        parts.push(format!("[{n_patients} × {len} × {width}]"));
    }
    if wide {
        parts.push(format!("[{n_patients} × 8]"));
    }
    parts.join(" + ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldMetrics {
    pub fold: usize,
    pub rmse: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub target: Target,
    pub experiment: Experiment,
    pub n_records: usize,
    pub size: String,
    pub rmse: f64,
    pub rmse_std_across_folds: f64,
    /// max − min of the true deltas.
    pub value_range: f64,
    pub normalized_rmse: f64,
    pub accuracy: f64,
    pub per_fold: Vec<FoldMetrics>,
}

pub fn evaluate(preds: &[OofPrediction], experiment: Experiment, size: &str) -> Result<EvalReport> {
    let first = preds.first().ok_or(EvalError::EmptyInput)?;
    if let Some(p) = preds.iter().find(|p| p.target != first.target) {
        return Err(EvalError::Inconsistent(format!(
            "mixed targets {} and {}",
            first.target.key(),
            p.target.key()
        )));
    }
    let p: Vec<f64> = preds.iter().map(|r| r.pred_delta).collect();
    let t: Vec<f64> = preds.iter().map(|r| r.true_delta).collect();
    let total_rmse = rmse(&p, &t)?;
    let accuracy = classification_accuracy(&p, &t)?;
    let (lo, hi) = t
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let value_range = hi - lo;

    let mut fold_ids: Vec<usize> = preds.iter().map(|r| r.fold).collect();
    fold_ids.sort_unstable();
    fold_ids.dedup();
    let per_fold = fold_ids
        .into_iter()
        .map(|k| {
            let (fp, ft): (Vec<f64>, Vec<f64>) = preds
                .iter()
                .filter(|r| r.fold == k)
                .map(|r| (r.pred_delta, r.true_delta))
                .unzip();
            Ok(FoldMetrics {
                fold: k,
                rmse: rmse(&fp, &ft)?,
                accuracy: classification_accuracy(&fp, &ft)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = per_fold.iter().map(|f| f.rmse).sum::<f64>() / per_fold.len() as f64;
    let var = per_fold.iter().map(|f| (f.rmse - mean).powi(2)).sum::<f64>() / per_fold.len() as f64;

    Ok(EvalReport {
        target: first.target,
        experiment,
        n_records: preds.len(),
        size: size.to_string(),
        rmse: total_rmse,
        rmse_std_across_folds: var.sqrt(),
        value_range,
        normalized_rmse: if value_range > 0.0 { total_rmse / value_range } else { f64::NAN },
        accuracy,
        per_fold,
    })
}

pub const REPORT_HEADER: [&str; 8] = [
    "index",
    "signal",
    "size",
    "rmse",
    "rmse_std",
    "range",
    "normalized_rmse",
    "accuracy",
];

/// One line of the report CSV. Fold breakdown and record count are not part
/// of the file.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub target: Target,
    pub experiment: Experiment,
    pub size: String,
    pub rmse: f64,
    pub rmse_std: f64,
    pub range: f64,
    pub normalized_rmse: f64,
    pub accuracy: f64,
}

impl From<&EvalReport> for ReportRow {
    fn from(r: &EvalReport) -> Self {
        Self {
            target: r.target,
            experiment: r.experiment,
            size: r.size.clone(),
            rmse: r.rmse,
            rmse_std: r.rmse_std_across_folds,
            range: r.value_range,
            normalized_rmse: r.normalized_rmse,
            accuracy: r.accuracy,
        }
    }
}

impl ReportRow {
    fn to_record(&self) -> [String; 8] {
        [
            self.target.label().to_string(),
            self.experiment.signal().to_string(),
            self.size.clone(),
            self.rmse.to_string(),
            self.rmse_std.to_string(),
            self.range.to_string(),
            self.normalized_rmse.to_string(),
            self.accuracy.to_string(),
        ]
    }
}

pub fn write_report_csv(rows: &[ReportRow], path: &Path) -> Result<()> {
    let io = |e: csv::Error| EvalError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(REPORT_HEADER).map_err(io)?;
    for r in rows {
        w.write_record(r.to_record()).map_err(io)?;
    }
    w.flush().map_err(|e| io(e.into()))
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let parse_err = |reason: String| EvalError::Parse {
        path: path.display().to_string(),
        reason,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let header = r.headers().map_err(|e| parse_err(e.to_string()))?.clone();
    if header.iter().ne(REPORT_HEADER) {
        return Err(parse_err(format!("unexpected header {}", header.iter().collect::<Vec<_>>().join(","))));
    }
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| parse_err(e.to_string()))?;
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .parse()
                    .map_err(|_| parse_err(format!("{} = `{}` is not a number", REPORT_HEADER[i], &rec[i])))
            };
            Ok(ReportRow {
                target: rec[0].parse().map_err(|_| parse_err(format!("unknown index `{}`", &rec[0])))?,
                experiment: Experiment::from_signal(&rec[1])
                    .ok_or_else(|| parse_err(format!("unknown signal `{}`", &rec[1])))?,
                size: rec[2].to_string(),
                rmse: num(3)?,
                rmse_std: num(4)?,
                range: num(5)?,
                normalized_rmse: num(6)?,
                accuracy: num(7)?,
            })
        })
        .collect()
}

/// Aligned text rendering with the columns Index, Signal, Size, RMSE,
/// RMSE/Range, Accuracy.
pub fn render_table(rows: &[ReportRow]) -> String {
    let header = ["Index", "Signal", "Size", "RMSE", "RMSE/Range", "Accuracy"];
    let cells: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.target.label().to_string(),
                r.experiment.signal().to_string(),
                r.size.clone(),
                format!("{:.3}", r.rmse),
                format!("{:.3}", r.normalized_rmse),
                format!("{:.2}%", r.accuracy * 100.0),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |fields: &[String]| {
        let padded: Vec<String> = fields
            .iter()
            .zip(widths)
            .map(|(f, w)| format!("{f}{}", " ".repeat(w - f.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", padded.join(" | ").trim_end());
    };
    line(&header.map(String::from));
    line(&widths.map(|w| "-".repeat(w)));
    for row in &cells {
        line(row);
    }
    out
}

/// Writes `csv_path` and a text table next to it (same stem, `.txt`).
/// Returns the table path.
pub fn emit_report(reports: &[ReportRow], csv_path: &Path) -> Result<PathBuf> {
    if reports.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    write_report_csv(reports, csv_path)?;
    let txt = csv_path.with_extension("txt");
    std::fs::write(&txt, render_table(reports)).map_err(|e| EvalError::Io {
        path: txt.display().to_string(),
        reason: e.to_string(),
    })?;
    Ok(txt)
}
