use serde::{Deserialize, Serialize};

use super::boxes::{iou, BBox};

pub const DEFAULT_IOU_THRESHOLDS: [f64; 2] = [0.1, 0.3];

/// Boxes of one (image, class) pair in the evaluation frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocCase {
    pub image_id: String,
    pub class_id: usize,
    pub predicted: Vec<BBox>,
    /// Empty for a negative case.
    pub ground_truth: Vec<BBox>,
}

impl LocCase {
    /// Positive cases are correct when some predicted box overlaps some
    /// ground-truth box with IoU strictly above `t`. Negative cases are
    /// correct when nothing is predicted.
    pub fn is_correct(&self, t: f64) -> bool {
        if self.ground_truth.is_empty() {
            return self.predicted.is_empty();
        }
        self.predicted
            .iter()
            .any(|p| self.ground_truth.iter().any(|g| iou(p, g) > t))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocRow {
    pub threshold: f64,
    pub correct: Vec<usize>,
    pub total: Vec<usize>,
    /// `correct / total` per class; `None` for classes without cases.
    pub accuracy: Vec<Option<f64>>,
}

/// Per-class accuracy at every threshold. Negative cases only count when
/// `include_negatives` is set.
pub fn localization_score(cases: &[LocCase], n_classes: usize, thresholds: &[f64], include_negatives: bool) -> Vec<LocRow> {
    thresholds
        .iter()
        .map(|&t| {
            let mut correct = vec![0usize; n_classes];
            let mut total = vec![0usize; n_classes];
            for case in cases {
                if case.ground_truth.is_empty() && !include_negatives {
                    continue;
                }
                total[case.class_id] += 1;
                correct[case.class_id] += case.is_correct(t) as usize;
            }
            let accuracy = correct
                .iter()
                .zip(&total)
                .map(|(&c, &n)| (n > 0).then(|| c as f64 / n as f64))
                .collect();
            LocRow {
                threshold: t,
                correct,
                total,
                accuracy,
            }
        })
        .collect()
}
