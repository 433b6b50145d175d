//! Classification metrics: accuracy, per-class precision/recall/F1, and the
//! confusion matrix they are all derived from.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: u32,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of evaluation items whose true label is this class.
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Unweighted mean of per-class F1; a class with no true and no
    /// predicted positives contributes 0.
    pub macro_f1: f64,
    /// Micro-averaged F1, which equals accuracy for single-label tasks.
    pub micro_f1: f64,
    pub total: u64,
    /// Class index -> label value, sorted ascending.
    pub classes: Vec<u32>,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[actual][predicted]`, indices into `classes`.
    pub confusion: Vec<Vec<u64>>,
}

/// Computes metrics over a fixed class space. When `class_space` is `None`
/// the space is the sorted union of labels seen in `actual` and `predicted`.
pub fn compute_metrics(actual: &[u32], predicted: &[u32], class_space: Option<&[u32]>) -> Metrics {
    assert_eq!(
        actual.len(),
        predicted.len(),
        "compute_metrics: {} actual vs {} predicted labels",
        actual.len(),
        predicted.len()
    );
    assert!(!actual.is_empty(), "compute_metrics: empty evaluation");

    let classes: Vec<u32> = match class_space {
        Some(space) => {
            let mut c = space.to_vec();
            c.sort_unstable();
            c.dedup();
            c
        }
        None => {
            let mut c: Vec<u32> = actual.iter().chain(predicted).copied().collect();
            c.sort_unstable();
            c.dedup();
            c
        }
    };
    let index_of = |label: u32| -> usize {
        classes
            .binary_search(&label)
            .unwrap_or_else(|_| panic!("label {label} outside the class space {classes:?}"))
    };

    let k = classes.len();
    let mut confusion = vec![vec![0u64; k]; k];
    for (&a, &p) in actual.iter().zip(predicted) {
        confusion[index_of(a)][index_of(p)] += 1;
    }
    metrics_from_confusion(classes, confusion)
}

/// Derives all scalar metrics from a confusion matrix; the struct fields
/// are exactly what this computes, so the matrix is self-contained.
pub fn metrics_from_confusion(classes: Vec<u32>, confusion: Vec<Vec<u64>>) -> Metrics {
    let k = classes.len();
    let total: u64 = confusion.iter().flatten().sum();
    let trace: u64 = (0..k).map(|i| confusion[i][i]).sum();

    let mut per_class = Vec::with_capacity(k);
    let mut f1_sum = 0.0;
    for c in 0..k {
        let tp = confusion[c][c];
        let support: u64 = confusion[c].iter().sum();
        let predicted: u64 = (0..k).map(|a| confusion[a][c]).sum();
        let precision = if predicted > 0 {
            tp as f64 / predicted as f64
        } else {
            0.0
        };
        let recall = if support > 0 {
            tp as f64 / support as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        f1_sum += f1;
        per_class.push(ClassMetrics {
            label: classes[c],
            precision,
            recall,
            f1,
            support,
        });
    }

    let accuracy = trace as f64 / total as f64;
    Metrics {
        accuracy,
        macro_f1: f1_sum / k as f64,
        micro_f1: accuracy,
        total,
        classes,
        per_class,
        confusion,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let m = compute_metrics(&[0, 1, 2, 1], &[0, 1, 2, 1], None);
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_f1, 1.0);
    }

    #[test]
    fn hand_computed_fixture() {
        // labels [0,0,1,1], preds [0,1,1,1]:
        //   class 0: precision 1, recall 1/2 -> f1 = 2/3
        //   class 1: precision 2/3, recall 1 -> f1 = 4/5
        // accuracy 3/4, macro-f1 (2/3 + 4/5)/2 = 11/15
        let m = compute_metrics(&[0, 0, 1, 1], &[0, 1, 1, 1], None);
        assert!((m.accuracy - 0.75).abs() < 1e-12);
        assert!((m.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.per_class[1].f1 - 0.8).abs() < 1e-12);
        assert!((m.macro_f1 - 11.0 / 15.0).abs() < 1e-9);
    }

    #[test]
    fn constant_predictor_on_balanced_classes() {
        let actual: Vec<u32> = (0..5).flat_map(|c| std::iter::repeat_n(c, 10)).collect();
        let predicted = vec![3u32; actual.len()];
        let m = compute_metrics(&actual, &predicted, None);
        assert_eq!(m.accuracy, 1.0 / 5.0);
    }

    #[test]
    fn absent_class_contributes_zero_f1() {
        let m = compute_metrics(&[0, 0], &[0, 0], Some(&[0, 1]));
        assert_eq!(m.per_class[1].f1, 0.0);
        assert!((m.macro_f1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn confusion_row_sums_equal_support_and_scalars_recompute() {
        let m = compute_metrics(&[0, 1, 1, 2, 2, 2], &[0, 1, 2, 2, 0, 2], None);
        for (c, row) in m.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<u64>(), m.per_class[c].support);
        }
        let re = metrics_from_confusion(m.classes.clone(), m.confusion.clone());
        assert_eq!(re, m);
    }
}
