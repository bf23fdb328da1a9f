//! Confusion-matrix accumulation and classification metrics.
//!
//! Reports carry accuracy plus per-class and macro-averaged precision,
//! recall, and F1. Macro averaging is the unweighted mean across classes; a
//! class that never appears in the predictions (or the truth) contributes 0
//! to the average rather than NaN.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty confusion matrix")]
    EmptyMatrix,
}

/// K x K table of (true class, predicted class) counts; rows are the truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        assert!(classes >= 1, "need at least one class");
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_pairs(
        classes: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, MetricsError> {
        let mut cm = ConfusionMatrix::new(classes);
        for (t, p) in pairs {
            cm.accumulate(t, p)?;
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn accumulate(
        &mut self,
        true_label: usize,
        predicted_label: usize,
    ) -> Result<(), MetricsError> {
        let k = self.classes;
        for label in [true_label, predicted_label] {
            if label >= k {
                return Err(MetricsError::LabelOutOfRange { label, classes: k });
            }
        }
        self.counts[true_label * k + predicted_label] += 1;
        Ok(())
    }

    pub fn count(&self, true_label: usize, predicted_label: usize) -> u64 {
        self.counts[true_label * self.classes + predicted_label]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.count(i, i)).sum()
    }

    fn row_sum(&self, row: usize) -> u64 {
        (0..self.classes).map(|j| self.count(row, j)).sum()
    }

    fn col_sum(&self, col: usize) -> u64 {
        (0..self.classes).map(|i| self.count(i, col)).sum()
    }

    /// Renders the counts as CSV, one row of integers per true class.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.classes {
            let row: Vec<String> = (0..self.classes)
                .map(|j| self.count(i, j).to_string())
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Accuracy plus per-class and macro precision / recall / F1, all in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    pub per_class_f1: Vec<f64>,
}

/// Derives the full metric report from an accumulated confusion matrix.
pub fn compute_report(cm: &ConfusionMatrix) -> Result<MetricReport, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let k = cm.classes();
    let mut precision = Vec::with_capacity(k);
    let mut recall = Vec::with_capacity(k);
    let mut f1 = Vec::with_capacity(k);
    for j in 0..k {
        let tp = cm.count(j, j) as f64;
        let col = cm.col_sum(j) as f64;
        let row = cm.row_sum(j) as f64;
        let p = if col > 0.0 { tp / col } else { 0.0 };
        let r = if row > 0.0 { tp / row } else { 0.0 };
        let f = if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        };
        precision.push(p);
        recall.push(r);
        f1.push(f);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(MetricReport {
        accuracy: cm.trace() as f64 / total as f64,
        macro_precision: mean(&precision),
        macro_recall: mean(&recall),
        macro_f1: mean(&f1),
        per_class_precision: precision,
        per_class_recall: recall,
        per_class_f1: f1,
    })
}

const TABLE_COLUMNS: [&str; 4] = ["Accuracy", "Precision", "Recall", "F1 Score"];

/// Fixed-width results table with values as percentages at two decimals.
///
/// Columns are `Model | Accuracy | Precision | Recall | F1 Score` and rows
/// keep the order they are given in.
pub fn format_table(rows: &[(String, MetricReport)]) -> String {
    let name_width = rows
        .iter()
        .map(|(name, _)| name.len())
        .chain(["Model".len()])
        .max()
        .unwrap_or(5);
    let mut out = String::new();
    out.push_str(&format!("{:<name_width$}", "Model"));
    for col in TABLE_COLUMNS {
        out.push_str(&format!("  {col:>9}"));
    }
    out.push('\n');
    for (name, report) in rows {
        out.push_str(&format!("{name:<name_width$}"));
        for value in [
            report.accuracy,
            report.macro_precision,
            report.macro_recall,
            report.macro_f1,
        ] {
            out.push_str(&format!("  {:>9.2}", value * 100.0));
        }
        out.push('\n');
    }
    out
}

/// CSV export with fractional values at four decimals.
pub fn report_csv(rows: &[(String, MetricReport)]) -> String {
    let mut out = String::from("model,accuracy,precision,recall,f1\n");
    for (name, report) in rows {
        out.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4}\n",
            name, report.accuracy, report.macro_precision, report.macro_recall, report.macro_f1
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    /// Independent recomputation of every metric straight from label pairs.
    /// Deliberately avoids the ConfusionMatrix bookkeeping.
    pub(crate) fn brute_force_report(k: usize, pairs: &[(usize, usize)]) -> MetricReport {
        let n = pairs.len() as f64;
        let correct = pairs.iter().filter(|(t, p)| t == p).count() as f64;
        let mut precision = vec![0.0; k];
        let mut recall = vec![0.0; k];
        let mut f1 = vec![0.0; k];
        for j in 0..k {
            let tp = pairs.iter().filter(|&&(t, p)| t == j && p == j).count() as f64;
            let predicted_j = pairs.iter().filter(|&&(_, p)| p == j).count() as f64;
            let true_j = pairs.iter().filter(|&&(t, _)| t == j).count() as f64;
            precision[j] = if predicted_j > 0.0 { tp / predicted_j } else { 0.0 };
            recall[j] = if true_j > 0.0 { tp / true_j } else { 0.0 };
            f1[j] = if precision[j] + recall[j] > 0.0 {
                2.0 * precision[j] * recall[j] / (precision[j] + recall[j])
            } else {
                0.0
            };
        }
        MetricReport {
            accuracy: correct / n,
            macro_precision: precision.iter().sum::<f64>() / k as f64,
            macro_recall: recall.iter().sum::<f64>() / k as f64,
            macro_f1: f1.iter().sum::<f64>() / k as f64,
            per_class_precision: precision,
            per_class_recall: recall,
            per_class_f1: f1,
        }
    }

    #[test]
    fn single_increment() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(0, 0).unwrap();
        assert_eq!(cm.count(0, 0), 1);
        assert_eq!(cm.total(), 1);
    }

    #[test]
    fn total_counts_samples() {
        let pairs: Vec<(usize, usize)> = (0..17).map(|i| (i % 3, (i + 1) % 3)).collect();
        let cm = ConfusionMatrix::from_pairs(3, pairs).unwrap();
        assert_eq!(cm.total(), 17);
    }

    #[test]
    fn accumulation_order_is_irrelevant() {
        let pairs = vec![(0, 1), (2, 2), (1, 0), (1, 1), (0, 0)];
        let forward = ConfusionMatrix::from_pairs(3, pairs.iter().copied()).unwrap();
        let backward = ConfusionMatrix::from_pairs(3, pairs.iter().rev().copied()).unwrap();
        assert_eq!(forward, backward);
    }

    #[test]
    fn rejects_out_of_range_label() {
        let mut cm = ConfusionMatrix::new(3);
        assert!(matches!(
            cm.accumulate(3, 0),
            Err(MetricsError::LabelOutOfRange { .. })
        ));
        assert!(matches!(
            cm.accumulate(0, 5),
            Err(MetricsError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn perfect_diagonal_scores_one() {
        let cm = ConfusionMatrix::from_pairs(3, [(0, 0), (1, 1), (2, 2), (1, 1)]).unwrap();
        let r = compute_report(&cm).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_precision, 1.0);
        assert_eq!(r.macro_recall, 1.0);
        assert_eq!(r.macro_f1, 1.0);
    }

    #[test]
    fn six_sample_worked_example() {
        let y_true = [0, 0, 1, 1, 2, 2];
        let y_pred = [0, 1, 1, 1, 2, 0];
        let cm =
            ConfusionMatrix::from_pairs(3, y_true.iter().copied().zip(y_pred.iter().copied()))
                .unwrap();
        let r = compute_report(&cm).unwrap();
        assert!((r.accuracy - 0.6667).abs() < 5e-5);
        assert!((r.macro_precision - 0.7222).abs() < 5e-5);
        assert!((r.macro_recall - 0.6667).abs() < 5e-5);
        assert!((r.macro_f1 - 0.6556).abs() < 5e-5);
    }

    #[test]
    fn constant_predictor_on_balanced_truth() {
        let pairs: Vec<(usize, usize)> = (0..9).map(|i| (i % 3, 0)).collect();
        let cm = ConfusionMatrix::from_pairs(3, pairs).unwrap();
        let r = compute_report(&cm).unwrap();
        assert!((r.accuracy - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.macro_recall - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_matrix_is_an_error() {
        let cm = ConfusionMatrix::new(3);
        assert!(matches!(
            compute_report(&cm),
            Err(MetricsError::EmptyMatrix)
        ));
    }

    #[test]
    fn empty_class_contributes_zero_not_nan() {
        // Class 2 never appears in truth or predictions.
        let cm = ConfusionMatrix::from_pairs(3, [(0, 0), (1, 0), (0, 1)]).unwrap();
        let r = compute_report(&cm).unwrap();
        assert_eq!(r.per_class_precision[2], 0.0);
        assert_eq!(r.per_class_recall[2], 0.0);
        assert_eq!(r.per_class_f1[2], 0.0);
        assert!(r.macro_f1.is_finite());
    }

    #[test]
    fn report_matches_brute_force_on_random_instances() {
        let mut rng = SplitMix64::new(0xC0FFEE);
        for _ in 0..300 {
            let k = [2, 3, 5][rng.next_below(3)];
            let n = 1 + rng.next_below(50);
            let pairs: Vec<(usize, usize)> = (0..n)
                .map(|_| (rng.next_below(k), rng.next_below(k)))
                .collect();
            let cm = ConfusionMatrix::from_pairs(k, pairs.iter().copied()).unwrap();
            let got = compute_report(&cm).unwrap();
            let want = brute_force_report(k, &pairs);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn accuracy_is_always_trace_over_total() {
        let mut rng = SplitMix64::new(99);
        for _ in 0..100 {
            let k = 2 + rng.next_below(4);
            let n = 1 + rng.next_below(40);
            let pairs: Vec<(usize, usize)> = (0..n)
                .map(|_| (rng.next_below(k), rng.next_below(k)))
                .collect();
            let cm = ConfusionMatrix::from_pairs(k, pairs).unwrap();
            let r = compute_report(&cm).unwrap();
            assert_eq!(r.accuracy, cm.trace() as f64 / cm.total() as f64);
        }
    }

    #[test]
    fn macro_metrics_invariant_under_label_permutation() {
        let mut rng = SplitMix64::new(7);
        for _ in 0..50 {
            let k = 3;
            let n = 1 + rng.next_below(30);
            let pairs: Vec<(usize, usize)> = (0..n)
                .map(|_| (rng.next_below(k), rng.next_below(k)))
                .collect();
            let perm = [2usize, 0, 1];
            let permuted: Vec<(usize, usize)> =
                pairs.iter().map(|&(t, p)| (perm[t], perm[p])).collect();
            let a = compute_report(&ConfusionMatrix::from_pairs(k, pairs).unwrap()).unwrap();
            let b = compute_report(&ConfusionMatrix::from_pairs(k, permuted).unwrap()).unwrap();
            assert!((a.accuracy - b.accuracy).abs() < 1e-15);
            assert!((a.macro_precision - b.macro_precision).abs() < 1e-12);
            assert!((a.macro_recall - b.macro_recall).abs() < 1e-12);
            assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
        }
    }

    #[test]
    fn values_always_in_unit_interval() {
        let mut rng = SplitMix64::new(1234);
        for _ in 0..200 {
            let k = 2 + rng.next_below(5);
            let n = 1 + rng.next_below(30);
            let pairs: Vec<(usize, usize)> = (0..n)
                .map(|_| (rng.next_below(k), rng.next_below(k)))
                .collect();
            let r = compute_report(&ConfusionMatrix::from_pairs(k, pairs).unwrap()).unwrap();
            for v in [r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn table_renders_percentages() {
        let report = MetricReport {
            accuracy: 0.8833,
            macro_precision: 0.8562,
            macro_recall: 0.7629,
            macro_f1: 0.7582,
            per_class_precision: vec![],
            per_class_recall: vec![],
            per_class_f1: vec![],
        };
        let table = format_table(&[("Ensembling".to_string(), report)]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 2);
        let header: Vec<&str> = lines[0].split_whitespace().collect();
        assert_eq!(
            header,
            vec!["Model", "Accuracy", "Precision", "Recall", "F1", "Score"]
        );
        let cells: Vec<&str> = lines[1].split_whitespace().collect();
        assert_eq!(cells, vec!["Ensembling", "88.33", "85.62", "76.29", "75.82"]);
    }

    #[test]
    fn table_renders_hundred_percent() {
        let report = MetricReport {
            accuracy: 1.0,
            macro_precision: 1.0,
            macro_recall: 1.0,
            macro_f1: 1.0,
            per_class_precision: vec![],
            per_class_recall: vec![],
            per_class_f1: vec![],
        };
        let table = format_table(&[("perfect".to_string(), report)]);
        assert!(table.contains("100.00"));
    }

    #[test]
    fn table_preserves_row_order() {
        let r = MetricReport {
            accuracy: 0.5,
            macro_precision: 0.5,
            macro_recall: 0.5,
            macro_f1: 0.5,
            per_class_precision: vec![],
            per_class_recall: vec![],
            per_class_f1: vec![],
        };
        let table = format_table(&[
            ("zebra".to_string(), r.clone()),
            ("aardvark".to_string(), r),
        ]);
        let lines: Vec<&str> = table.lines().collect();
        assert!(lines[1].starts_with("zebra"));
        assert!(lines[2].starts_with("aardvark"));
    }

    #[test]
    fn csv_uses_four_decimal_fractions() {
        let report = MetricReport {
            accuracy: 0.8833,
            macro_precision: 0.8562,
            macro_recall: 0.7629,
            macro_f1: 0.7582,
            per_class_precision: vec![],
            per_class_recall: vec![],
            per_class_f1: vec![],
        };
        let csv = report_csv(&[("Ensembling".to_string(), report)]);
        assert_eq!(
            csv,
            "model,accuracy,precision,recall,f1\nEnsembling,0.8833,0.8562,0.7629,0.7582\n"
        );
    }

    #[test]
    fn confusion_csv_rows_are_true_classes() {
        let cm = ConfusionMatrix::from_pairs(2, [(0, 1), (0, 1), (1, 0)]).unwrap();
        assert_eq!(cm.to_csv(), "0,2\n1,0\n");
    }
}
