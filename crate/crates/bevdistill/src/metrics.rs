//! Confusion-matrix evaluation and mean intersection-over-union.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `C×C` counts, rows indexed by ground truth and columns by prediction.
/// Ignore-labeled points never enter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

/// Per-class IoU (`None` for classes absent from both ground truth and
/// prediction) plus their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    /// Accumulates prediction/target pairs, skipping ignore-labeled points.
    pub fn accumulate(&mut self, predictions: &[u32], targets: &[u32], ignore_id: u32) {
        assert_eq!(predictions.len(), targets.len(), "prediction count");
        for (&p, &t) in predictions.iter().zip(targets) {
            if t == ignore_id {
                continue;
            }
            debug_assert!((p as usize) < self.num_classes);
            self.counts[t as usize * self.num_classes + p as usize] += 1;
        }
    }

    /// Merges another matrix (accumulation is associative).
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// From explicit counts, rows = ground truth.
    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Self {
        assert_eq!(counts.len(), num_classes * num_classes);
        ConfusionMatrix {
            num_classes,
            counts,
        }
    }

    /// Per-class `IoU_c = TP / (TP + FP + FN)`; classes absent from both
    /// ground truth and prediction are excluded from the mean.
    pub fn miou(&self) -> Result<IouReport> {
        if self.total() == 0 {
            return Err(Error::Numeric(
                "miou: the confusion matrix is empty".into(),
            ));
        }
        let c = self.num_classes;
        let mut per_class = Vec::with_capacity(c);
        let mut sum = 0.0;
        let mut present = 0usize;
        for k in 0..c {
            let tp = self.count(k, k);
            let row: u64 = (0..c).map(|j| self.count(k, j)).sum();
            let col: u64 = (0..c).map(|i| self.count(i, k)).sum();
            let denom = row + col - tp;
            if denom == 0 {
                per_class.push(None);
            } else {
                let iou = tp as f64 / denom as f64;
                per_class.push(Some(iou));
                sum += iou;
                present += 1;
            }
        }
        Ok(IouReport {
            per_class,
            mean: sum / present as f64,
        })
    }
}

impl IouReport {
    /// CSV report: one `name,iou` row per class (empty IoU for absent
    /// classes) and a final `miou` row.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("class,iou\n");
        for (k, iou) in self.per_class.iter().enumerate() {
            let name = class_names
                .get(k)
                .cloned()
                .unwrap_or_else(|| format!("class_{k}"));
            match iou {
                Some(v) => writeln!(out, "{name},{v}").unwrap(),
                None => writeln!(out, "{name},").unwrap(),
            }
        }
        writeln!(out, "miou,{}", self.mean).unwrap();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_score_one() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 2, 1, 0], &[0, 1, 2, 1, 0], 255);
        let report = cm.miou().unwrap();
        assert_eq!(report.mean, 1.0);
        assert_eq!(report.per_class, vec![Some(1.0); 3]);
    }

    #[test]
    fn hand_computed_example() {
        let cm = ConfusionMatrix::from_counts(2, vec![50, 50, 0, 100]);
        let report = cm.miou().unwrap();
        assert!((report.per_class[0].unwrap() - 0.5).abs() < 1e-15);
        assert!((report.per_class[1].unwrap() - 100.0 / 150.0).abs() < 1e-15);
        assert!((report.mean - 7.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn all_wrong_binary_is_zero() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[1, 1, 0], &[0, 0, 1], 255);
        assert_eq!(cm.miou().unwrap().mean, 0.0);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&[0, 0, 1], &[0, 1, 1], 255);
        let report = cm.miou().unwrap();
        assert_eq!(report.per_class[2], None);
        assert_eq!(report.per_class[3], None);
        // classes 0, 1 both at IoU 1/2
        assert!((report.mean - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ignore_labels_are_skipped_and_empty_errors() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1], &[255, 255], 255);
        assert!(cm.miou().is_err());
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn invariant_under_class_permutation() {
        let preds = [0u32, 1, 2, 0, 2, 1, 1];
        let targets = [0u32, 2, 2, 1, 0, 1, 1];
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&preds, &targets, 255);
        // permutation 0->2, 1->0, 2->1
        let perm = [2u32, 0, 1];
        let mapped_p: Vec<u32> = preds.iter().map(|&p| perm[p as usize]).collect();
        let mapped_t: Vec<u32> = targets.iter().map(|&t| perm[t as usize]).collect();
        let mut cm2 = ConfusionMatrix::new(3);
        cm2.accumulate(&mapped_p, &mapped_t, 255);
        assert_eq!(cm.miou().unwrap().mean, cm2.miou().unwrap().mean);
    }

    #[test]
    fn merge_matches_joint_accumulation() {
        let mut a = ConfusionMatrix::new(2);
        let mut b = ConfusionMatrix::new(2);
        let mut joint = ConfusionMatrix::new(2);
        a.accumulate(&[0, 1], &[0, 0], 255);
        b.accumulate(&[1, 1], &[1, 0], 255);
        joint.accumulate(&[0, 1, 1, 1], &[0, 0, 1, 0], 255);
        a.merge(&b);
        assert_eq!(a, joint);
    }

    #[test]
    fn csv_report_shape() {
        let cm = ConfusionMatrix::from_counts(2, vec![3, 1, 0, 4]);
        let report = cm.miou().unwrap();
        let csv = report.to_csv(&["road".into(), "car".into()]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "class,iou");
        assert!(lines[1].starts_with("road,"));
        assert!(lines[2].starts_with("car,"));
        assert!(lines[3].starts_with("miou,"));
    }
}
