//! Per-class precision/recall/F1 with supports, aggregated across classes
//! by the harmonic mean (the aggregation that reproduces the published
//! per-model summary rows; the arithmetic mean does not).

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::EMOTIONS;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("predictions ({0}) and labels ({1}) differ in length")]
    LengthMismatch(usize, usize),
    #[error("class index {0} out of range for {1} classes")]
    IndexOutOfRange(usize, usize),
    #[error("harmonic mean undefined: {0} is zero for class {1}")]
    ZeroMetricValue(&'static str, usize),
    #[error("{0}: {1}")]
    Io(String, #[source] io::Error),
    #[error("malformed report: {0}")]
    MalformedReport(String),
}

/// Row-major `classes x classes` counts; rows are true classes, columns
/// predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn from_pairs(preds: &[usize], labels: &[usize], classes: usize) -> Result<Self, MetricsError> {
        if preds.len() != labels.len() {
            return Err(MetricsError::LengthMismatch(preds.len(), labels.len()));
        }
        let mut counts = vec![0usize; classes * classes];
        for (&p, &t) in preds.iter().zip(labels) {
            if p >= classes {
                return Err(MetricsError::IndexOutOfRange(p, classes));
            }
            if t >= classes {
                return Err(MetricsError::IndexOutOfRange(t, classes));
            }
            counts[t * classes + p] += 1;
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, true_class: usize, pred_class: usize) -> usize {
        self.counts[true_class * self.classes + pred_class]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    fn row_sum(&self, t: usize) -> usize {
        (0..self.classes).map(|p| self.count(t, p)).sum()
    }

    fn col_sum(&self, p: usize) -> usize {
        (0..self.classes).map(|t| self.count(t, p)).sum()
    }
}

/// One class's metrics. `flagged` marks a zero-denominator precision or
/// recall that was mapped to 0 by convention.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub classes: Vec<ClassMetrics>,
}

/// Harmonic means of the per-class columns.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn per_class_metrics(cm: &ConfusionMatrix) -> ClassReport {
    let classes = (0..cm.classes())
        .map(|k| {
            let tp = cm.count(k, k) as f64;
            let col = cm.col_sum(k);
            let row = cm.row_sum(k);
            let mut flagged = false;
            let precision = if col == 0 {
                flagged = true;
                0.0
            } else {
                tp / col as f64
            };
            let recall = if row == 0 {
                flagged = true;
                0.0
            } else {
                tp / row as f64
            };
            let f1 = f1_score(precision, recall);
            ClassMetrics { precision, recall, f1, support: row, flagged }
        })
        .collect();
    ClassReport { classes }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// `C / sum_k(1 / v_k)` for each metric column, computed independently.
/// Errors if any per-class value is zero (the mean is undefined there).
pub fn harmonic_aggregate(report: &ClassReport) -> Result<AggregateReport, MetricsError> {
    let column = |name: &'static str, get: fn(&ClassMetrics) -> f64| {
        let mut inv_sum = 0.0;
        for (k, class) in report.classes.iter().enumerate() {
            let v = get(class);
            if v <= 0.0 {
                return Err(MetricsError::ZeroMetricValue(name, k));
            }
            inv_sum += 1.0 / v;
        }
        Ok(report.classes.len() as f64 / inv_sum)
    };
    Ok(AggregateReport {
        precision: column("precision", |c| c.precision)?,
        recall: column("recall", |c| c.recall)?,
        f1: column("f1", |c| c.f1)?,
    })
}

/// Harmonic mean of an arbitrary positive slice (test and probe helper).
pub fn harmonic_mean(values: &[f64]) -> f64 {
    values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>()
}

/// Render the report as CSV mirroring the results-table layout: one row per
/// class plus a `harmonic_mean` row (support `-`).
pub fn report_to_csv(report: &ClassReport, aggregate: Option<&AggregateReport>) -> String {
    let mut out = String::from("class,precision,recall,f1,support\n");
    for (k, c) in report.classes.iter().enumerate() {
        let name = EMOTIONS.get(k).copied().unwrap_or("?");
        let _ = writeln!(out, "{name},{:.6},{:.6},{:.6},{}", c.precision, c.recall, c.f1, c.support);
    }
    if let Some(agg) = aggregate {
        let _ = writeln!(out, "harmonic_mean,{:.6},{:.6},{:.6},-", agg.precision, agg.recall, agg.f1);
    }
    out
}

pub fn write_report_csv(
    path: &Path,
    report: &ClassReport,
    aggregate: Option<&AggregateReport>,
) -> Result<(), MetricsError> {
    std::fs::write(path, report_to_csv(report, aggregate))
        .map_err(|e| MetricsError::Io(path.display().to_string(), e))
}

/// Pretty console table for a saved report CSV.
pub fn render_report_table(csv_text: &str) -> Result<String, MetricsError> {
    let mut rows: Vec<Vec<String>> = Vec::new();
    for (i, line) in csv_text.lines().enumerate() {
        let fields: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
        if fields.len() != 5 {
            return Err(MetricsError::MalformedReport(format!("line {}: expected 5 fields", i + 1)));
        }
        rows.push(fields);
    }
    if rows.is_empty() {
        return Err(MetricsError::MalformedReport("empty report".into()));
    }
    let mut widths = [0usize; 5];
    for row in &rows {
        for (w, field) in widths.iter_mut().zip(row) {
            *w = (*w).max(field.len());
        }
    }
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let mut line = String::new();
        for (j, field) in row.iter().enumerate() {
            if j == 0 {
                let _ = write!(line, "{:<width$}", field, width = widths[0] + 2);
            } else {
                let _ = write!(line, "{:>width$}", field, width = widths[j] + 2);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
        if i == 0 {
            let total: usize = widths.iter().sum::<usize>() + 2 * widths.len();
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identity_predictions_fill_the_diagonal() {
        let cm = ConfusionMatrix::from_pairs(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                assert_eq!(cm.count(t, p), usize::from(t == p));
            }
        }
        let report = per_class_metrics(&cm);
        for c in &report.classes {
            assert_eq!((c.precision, c.recall, c.f1), (1.0, 1.0, 1.0));
            assert_eq!(c.support, 1);
        }
    }

    #[test]
    fn empty_input_gives_a_zero_matrix() {
        let cm = ConfusionMatrix::from_pairs(&[], &[], 6).unwrap();
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn off_diagonal_counts_follow_true_row_pred_column() {
        let cm = ConfusionMatrix::from_pairs(&[1, 1], &[0, 1], 2).unwrap();
        assert_eq!(cm.count(0, 1), 1);
        assert_eq!(cm.count(1, 1), 1);
        assert_eq!(cm.count(0, 0), 0);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        assert!(matches!(
            ConfusionMatrix::from_pairs(&[0], &[0, 1], 2),
            Err(MetricsError::LengthMismatch(1, 2))
        ));
        assert!(matches!(
            ConfusionMatrix::from_pairs(&[5], &[0], 2),
            Err(MetricsError::IndexOutOfRange(5, 2))
        ));
    }

    #[test]
    fn never_predicted_class_gets_zeroes_and_a_flag() {
        // Class 1 is present but never predicted.
        let cm = ConfusionMatrix::from_pairs(&[0, 0, 0], &[0, 1, 1], 2).unwrap();
        let report = per_class_metrics(&cm);
        assert_eq!(report.classes[1].precision, 0.0);
        assert_eq!(report.classes[1].recall, 0.0);
        assert!(report.classes[1].flagged);
        assert!(!report.classes[0].flagged);
        assert!(harmonic_aggregate(&report).is_err());
    }

    #[test]
    fn supports_sum_to_total_count() {
        let preds = [0, 1, 2, 3, 4, 5, 0, 1];
        let labels = [5, 4, 3, 2, 1, 0, 0, 1];
        let cm = ConfusionMatrix::from_pairs(&preds, &labels, 6).unwrap();
        let report = per_class_metrics(&cm);
        let total: usize = report.classes.iter().map(|c| c.support).sum();
        assert_eq!(total, preds.len());
        assert_eq!(cm.total(), preds.len());
    }

    #[test]
    fn published_angry_row_f1_matches() {
        // Precision 0.727, recall 0.743 give f1 0.735.
        let f1 = f1_score(0.727, 0.743);
        assert!((f1 - 0.735).abs() < 1e-3);
    }

    #[test]
    fn published_recall_aggregate_matches() {
        let h = harmonic_mean(&[0.743, 0.879, 0.683, 0.614, 0.779, 0.314]);
        assert!((h - 0.597).abs() < 2e-3);
    }

    #[test]
    fn published_f1_aggregate_matches() {
        let h = harmonic_mean(&[0.734, 0.916, 0.642, 0.554, 0.726, 0.459]);
        assert!((h - 0.640).abs() < 2e-3);
    }

    #[test]
    fn harmonic_mean_of_equal_values_is_that_value() {
        assert_eq!(harmonic_mean(&[0.5; 6]), 0.5);
        assert_eq!(harmonic_mean(&[0.25; 6]), 0.25);
        assert_abs_diff_eq!(harmonic_mean(&[0.737; 6]), 0.737, epsilon = 1e-12);
    }

    #[test]
    fn aggregate_columns_are_independent() {
        let report = ClassReport {
            classes: vec![
                ClassMetrics { precision: 0.5, recall: 0.25, f1: 0.75, support: 3, flagged: false },
                ClassMetrics { precision: 0.5, recall: 0.25, f1: 0.75, support: 4, flagged: false },
            ],
        };
        let agg = harmonic_aggregate(&report).unwrap();
        assert_eq!(agg.precision, 0.5);
        assert_eq!(agg.recall, 0.25);
        assert_eq!(agg.f1, 0.75);
    }

    #[test]
    fn report_csv_has_class_rows_and_harmonic_row() {
        let cm = ConfusionMatrix::from_pairs(&[0, 1, 2, 3, 4, 5], &[0, 1, 2, 3, 4, 5], 6).unwrap();
        let report = per_class_metrics(&cm);
        let agg = harmonic_aggregate(&report).unwrap();
        let csv = report_to_csv(&report, Some(&agg));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 8);
        assert!(lines[0].starts_with("class,"));
        assert!(lines[1].starts_with("angry,"));
        assert!(lines[7].starts_with("harmonic_mean,"));
        assert!(lines[7].ends_with(",-"));
        // Round-trips through the console renderer.
        let table = render_report_table(&csv).unwrap();
        assert!(table.contains("harmonic_mean"));
    }

    #[test]
    fn permutation_equivariance_under_relabeling() {
        let preds = [0, 1, 1, 2, 0, 2, 1];
        let labels = [0, 1, 2, 2, 1, 0, 1];
        let cm = per_class_metrics(&ConfusionMatrix::from_pairs(&preds, &labels, 3).unwrap());
        // Swap classes 0 and 2 everywhere.
        let swap = |v: usize| match v {
            0 => 2,
            2 => 0,
            other => other,
        };
        let preds2: Vec<usize> = preds.iter().map(|&v| swap(v)).collect();
        let labels2: Vec<usize> = labels.iter().map(|&v| swap(v)).collect();
        let cm2 = per_class_metrics(&ConfusionMatrix::from_pairs(&preds2, &labels2, 3).unwrap());
        assert_eq!(cm.classes[0], cm2.classes[2]);
        assert_eq!(cm.classes[2], cm2.classes[0]);
        assert_eq!(cm.classes[1], cm2.classes[1]);
    }

    #[test]
    fn harmonic_is_at_most_arithmetic_on_random_reports() {
        // Fuzz with a simple deterministic generator.
        let mut state = 0x9E3779B97F4A7C15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state % 1000) as f64 / 1000.0 + 1e-3
        };
        for _ in 0..200 {
            let vals: Vec<f64> = (0..6).map(|_| next()).collect();
            let h = harmonic_mean(&vals);
            let a = vals.iter().sum::<f64>() / 6.0;
            assert!(h <= a + 1e-12, "harmonic {h} > arithmetic {a} for {vals:?}");
        }
    }
}
