use ndarray::ArrayView2;

use crate::error::{Error, Result};

/// Mann-Whitney AUC: the probability that a random positive outscores a
/// random negative, ties counted one half. Uses midranks, so it runs in
/// `O(n log n)` and needs both classes present.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {i}")));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Invalid(format!(
            "AUC needs both classes, got {n_pos} positives and {n_neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of 1-based midranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j + 1) as f64 / 2.0;
        let pos_in_tie = order[i..j].iter().filter(|&&k| labels[k]).count();
        rank_sum += midrank * pos_in_tie as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * n))
}

/// Per-class AUC over the columns of `N x K` score and label matrices.
/// Columns with a single label class yield `None`.
pub fn per_class_auc(scores: ArrayView2<f64>, labels: ArrayView2<f64>) -> Result<Vec<Option<f64>>> {
    if scores.dim() != labels.dim() {
        return Err(Error::Shape(format!(
            "scores {:?} vs labels {:?}",
            scores.dim(),
            labels.dim()
        )));
    }
    (0..scores.ncols())
        .map(|c| {
            let s: Vec<f64> = scores.column(c).to_vec();
            let l: Vec<bool> = labels.column(c).iter().map(|&v| v >= 0.5).collect();
            match roc_auc(&s, &l) {
                Ok(a) => Ok(Some(a)),
                Err(Error::Invalid(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Unweighted mean of the defined entries; `None` if there are none.
pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    /// Exhaustive pair count.
    fn pair_auc(s: &[f64], l: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] && !l[j] {
                    den += 1.0;
                    num += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn examples() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 5], &[true, false, true, false, false]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.9, 0.4, 0.6], &[true, false, true]).unwrap(), 1.0);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::Invalid(_))));
        assert!(roc_auc(&[f64::NAN, 0.2], &[true, false]).is_err());
    }

    #[test]
    fn per_class_flags_degenerate_columns() {
        let s = array![[0.9, 0.1], [0.2, 0.3], [0.7, 0.5]];
        let l = array![[1.0, 1.0], [0.0, 1.0], [1.0, 1.0]];
        let a = per_class_auc(s.view(), l.view()).unwrap();
        assert_eq!(a, vec![Some(1.0), None]);
        assert_eq!(mean_defined(&a), Some(1.0));
        assert_eq!(mean_defined(&[None]), None);
    }

    fn case() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..=20).prop_flat_map(|n| {
            (
                prop::collection::vec((0i32..6).prop_map(|v| v as f64 / 5.0), n),
                prop::collection::vec(any::<bool>(), n),
            )
                .prop_filter("both classes", |(_, l)| l.iter().any(|&b| b) && l.iter().any(|&b| !b))
        })
    }

    proptest! {
        #[test]
        fn matches_pair_count((s, l) in case()) {
            let a = roc_auc(&s, &l).unwrap();
            prop_assert!((a - pair_auc(&s, &l)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn monotone_invariance_and_reflection((s, l) in case()) {
            let a = roc_auc(&s, &l).unwrap();
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            prop_assert_eq!(roc_auc(&t, &l).unwrap(), a);
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            prop_assert!((roc_auc(&neg, &l).unwrap() + a - 1.0).abs() < 1e-12);
        }
    }
}
