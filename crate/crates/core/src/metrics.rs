//! Per-label precision, recall and F1 for multi-label detection.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LabelScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of positive ground-truth labels.
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct F1Report {
    pub labels: Vec<LabelScore>,
    /// Arithmetic mean of the per-label F1 scores.
    pub average_f1: f64,
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Scores at or above `threshold` count as positive predictions. Any ratio
/// with a zero denominator is reported as 0.
pub fn f1_report(scores: &Tensor, labels: &Tensor, threshold: f64) -> Result<F1Report> {
    if scores.shape() != labels.shape() {
        return Err(Error::Shape { op: "f1_report", lhs: scores.shape(), rhs: labels.shape() });
    }
    if scores.rows() == 0 {
        return Err(Error::Data("cannot score an empty evaluation set".into()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} outside (0, 1)")));
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let labels_out: Vec<LabelScore> = (0..scores.cols())
        .map(|j| {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for i in 0..scores.rows() {
                let predicted = scores.get(i, j) >= threshold;
                let actual = labels.get(i, j) == 1.0;
                match (predicted, actual) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * recall * precision / (recall + precision) };
            LabelScore { precision, recall, f1, support: tp + fn_ }
        })
        .collect();
    let average_f1 = labels_out.iter().map(|l| l.f1).sum::<f64>() / labels_out.len().max(1) as f64;
    Ok(F1Report { labels: labels_out, average_f1 })
}

pub const REPORT_HEADER: &str = "label,precision,recall,f1,support";

impl F1Report {
    /// CSV at full precision; the `average` row carries the mean of each
    /// column and the total support.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for (j, l) in self.labels.iter().enumerate() {
            out.push_str(&format!("{j},{},{},{},{}\n", l.precision, l.recall, l.f1, l.support));
        }
        let n = self.labels.len().max(1) as f64;
        let p = self.labels.iter().map(|l| l.precision).sum::<f64>() / n;
        let r = self.labels.iter().map(|l| l.recall).sum::<f64>() / n;
        let s: usize = self.labels.iter().map(|l| l.support).sum();
        out.push_str(&format!("average,{p},{r},{},{s}\n", self.average_f1));
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<usize> {
        crate::meta_engine::write_file(path, &self.to_csv())?;
        Ok(self.labels.len() + 1)
    }

    /// Human-readable `F1 x 100` table rounded to one decimal.
    pub fn display_percent(&self) -> String {
        let mut out = String::new();
        for (j, l) in self.labels.iter().enumerate() {
            out.push_str(&format!("label {j:>2}: {:5.1}\n", 100.0 * l.f1));
        }
        out.push_str(&format!("average : {:5.1}\n", 100.0 * self.average_f1));
        out
    }
}
