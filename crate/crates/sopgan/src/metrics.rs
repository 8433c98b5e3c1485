//! Classification metrics: confusion counts, the accuracy/precision/
//! recall/F1 family, and ranking AUC.

use crate::error::{Error, Result};

/// One scored test window with its ground-truth label and the thresholded
/// prediction.
#[derive(Debug, Clone, Copy)]
pub struct LabeledOutcome {
    pub label: bool,
    pub score: f64,
    pub predicted: bool,
}

/// Standard two-class confusion counts. `fn` is a Rust keyword, so the
/// four cells are spelled out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }
}

pub fn confusion(outcomes: &[LabeledOutcome]) -> Result<ConfusionMatrix> {
    if outcomes.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut cm = ConfusionMatrix {
        true_pos: 0,
        false_pos: 0,
        true_neg: 0,
        false_neg: 0,
    };
    for o in outcomes {
        match (o.label, o.predicted) {
            (true, true) => cm.true_pos += 1,
            (false, true) => cm.false_pos += 1,
            (false, false) => cm.true_neg += 1,
            (true, false) => cm.false_neg += 1,
        }
    }
    Ok(cm)
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let all = cm.total();
    if all == 0 {
        return Err(Error::UndefinedMetric { metric: "accuracy" });
    }
    Ok((cm.true_pos + cm.true_neg) as f64 / all as f64)
}

pub fn precision(cm: &ConfusionMatrix) -> Result<f64> {
    let denom = cm.true_pos + cm.false_pos;
    if denom == 0 {
        return Err(Error::UndefinedMetric { metric: "precision" });
    }
    Ok(cm.true_pos as f64 / denom as f64)
}

pub fn recall(cm: &ConfusionMatrix) -> Result<f64> {
    let denom = cm.true_pos + cm.false_neg;
    if denom == 0 {
        return Err(Error::UndefinedMetric { metric: "recall" });
    }
    Ok(cm.true_pos as f64 / denom as f64)
}

pub fn f1(cm: &ConfusionMatrix) -> Result<f64> {
    let p = precision(cm)?;
    let r = recall(cm)?;
    if p + r == 0.0 {
        return Err(Error::UndefinedMetric { metric: "f1" });
    }
    Ok(2.0 * p * r / (p + r))
}

/// Mann–Whitney AUC: the probability that a random positive outscores a
/// random negative, ties counted 1/2. Computed from average ranks in
/// O(n log n).
pub fn auc(outcomes: &[LabeledOutcome]) -> Result<f64> {
    let n_pos = outcomes.iter().filter(|o| o.label).count();
    let n_neg = outcomes.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::OneClassOnly);
    }
    let mut order: Vec<usize> = (0..outcomes.len()).collect();
    order.sort_by(|&a, &b| outcomes[a].score.total_cmp(&outcomes[b].score));

    // average 1-based ranks within tied runs, accumulated over positives
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && outcomes[order[j]].score == outcomes[order[i]].score {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
        for &idx in &order[i..j] {
            if outcomes[idx].label {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Area under the empirical ROC curve by trapezoidal integration. Kept as
/// an independent cross-check of the rank-based `auc`.
pub fn auc_trapezoidal(outcomes: &[LabeledOutcome]) -> Result<f64> {
    let n_pos = outcomes.iter().filter(|o| o.label).count() as f64;
    let n_neg = outcomes.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(Error::OneClassOnly);
    }
    // sweep thresholds from high to low; ties move as one block
    let mut order: Vec<usize> = (0..outcomes.len()).collect();
    order.sort_by(|&a, &b| outcomes[b].score.total_cmp(&outcomes[a].score));

    let (mut tp, mut fp) = (0.0, 0.0);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && outcomes[order[j]].score == outcomes[order[i]].score {
            if outcomes[order[j]].label {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            j += 1;
        }
        let (tpr, fpr) = (tp / n_pos, fp / n_neg);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
        i = j;
    }
    Ok(area)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn outcome(label: bool, score: f64) -> LabeledOutcome {
        LabeledOutcome {
            label,
            score,
            predicted: false,
        }
    }

    #[test]
    fn confusion_all_correct() {
        let outcomes = vec![
            LabeledOutcome { label: true, score: 1.0, predicted: true },
            LabeledOutcome { label: false, score: 0.0, predicted: false },
        ];
        let cm = confusion(&outcomes).unwrap();
        assert_eq!((cm.false_pos, cm.false_neg), (0, 0));
        assert_eq!((cm.true_pos, cm.true_neg), (1, 1));
    }

    #[test]
    fn confusion_mixed_enumeration() {
        let labels = [true, true, false, false];
        let preds = [true, false, false, true];
        let outcomes: Vec<_> = labels
            .iter()
            .zip(preds)
            .map(|(&l, p)| LabeledOutcome { label: l, score: 0.0, predicted: p })
            .collect();
        let cm = confusion(&outcomes).unwrap();
        assert_eq!(
            (cm.true_pos, cm.false_neg, cm.true_neg, cm.false_pos),
            (1, 1, 1, 1)
        );
    }

    #[test]
    fn confusion_matches_recount_oracle() {
        let mut rng = crate::seed::rng(41);
        let outcomes: Vec<_> = (0..1000)
            .map(|_| LabeledOutcome {
                label: rng.random_range(0..2) == 1,
                score: rng.random_range(-1.0..1.0),
                predicted: rng.random_range(0..2) == 1,
            })
            .collect();
        let cm = confusion(&outcomes).unwrap();
        // straight recount as an oracle
        let tp = outcomes.iter().filter(|o| o.label && o.predicted).count();
        let fp = outcomes.iter().filter(|o| !o.label && o.predicted).count();
        let tn = outcomes.iter().filter(|o| !o.label && !o.predicted).count();
        let fal_n = outcomes.iter().filter(|o| o.label && !o.predicted).count();
        assert_eq!(
            (cm.true_pos, cm.false_pos, cm.true_neg, cm.false_neg),
            (tp, fp, tn, fal_n)
        );
        assert_eq!(cm.total(), 1000);
    }

    #[test]
    fn f1_matches_reference_arithmetic() {
        // precision 100%, recall 95.7% → F1 97.8%
        let p: f64 = 1.0;
        let r: f64 = 0.957;
        let f = 2.0 * p * r / (p + r);
        assert!((f - 0.978).abs() < 0.0005, "f1 {f}");
        // precision 99.8%, recall 100% → F1 99.9%
        let p: f64 = 0.998;
        let r: f64 = 1.0;
        let f = 2.0 * p * r / (p + r);
        assert!((f - 0.999).abs() < 0.0005, "f1 {f}");
    }

    #[test]
    fn all_cells_one_gives_half_everywhere() {
        let cm = ConfusionMatrix {
            true_pos: 1,
            false_pos: 1,
            true_neg: 1,
            false_neg: 1,
        };
        assert_eq!(accuracy(&cm).unwrap(), 0.5);
        assert_eq!(precision(&cm).unwrap(), 0.5);
        assert_eq!(recall(&cm).unwrap(), 0.5);
        assert_eq!(f1(&cm).unwrap(), 0.5);
    }

    #[test]
    fn zero_denominators_are_reported() {
        let cm = ConfusionMatrix {
            true_pos: 0,
            false_pos: 0,
            true_neg: 5,
            false_neg: 0,
        };
        assert!(matches!(
            precision(&cm),
            Err(Error::UndefinedMetric { metric: "precision" })
        ));
        assert!(matches!(
            recall(&cm),
            Err(Error::UndefinedMetric { metric: "recall" })
        ));
    }

    #[test]
    fn auc_perfect_separation() {
        let outcomes = vec![
            outcome(false, 0.1),
            outcome(false, 0.2),
            outcome(true, 0.8),
            outcome(true, 0.9),
        ];
        assert_eq!(auc(&outcomes).unwrap(), 1.0);
        assert_eq!(auc_trapezoidal(&outcomes).unwrap(), 1.0);
    }

    #[test]
    fn auc_small_example_with_pair_oracle() {
        // positives {0.35, 0.8}, negatives {0.1, 0.4}: pairs won = 3 of 4
        let outcomes = vec![
            outcome(true, 0.35),
            outcome(true, 0.8),
            outcome(false, 0.1),
            outcome(false, 0.4),
        ];
        assert_eq!(auc(&outcomes).unwrap(), 0.75);
    }

    #[test]
    fn auc_all_ties_is_half() {
        let outcomes = vec![
            outcome(true, 0.5),
            outcome(true, 0.5),
            outcome(false, 0.5),
        ];
        assert_eq!(auc(&outcomes).unwrap(), 0.5);
        assert_eq!(auc_trapezoidal(&outcomes).unwrap(), 0.5);
    }

    #[test]
    fn auc_one_class_errors() {
        let outcomes = vec![outcome(true, 0.3), outcome(true, 0.6)];
        assert!(matches!(auc(&outcomes), Err(Error::OneClassOnly)));
        assert!(matches!(auc_trapezoidal(&outcomes), Err(Error::OneClassOnly)));
    }

    /// O(n²) pair-counting oracle for the Mann–Whitney statistic.
    fn auc_pairs(outcomes: &[LabeledOutcome]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for p in outcomes.iter().filter(|o| o.label) {
            for n in outcomes.iter().filter(|o| !o.label) {
                pairs += 1.0;
                if p.score > n.score {
                    wins += 1.0;
                } else if p.score == n.score {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    proptest! {
        #[test]
        fn auc_matches_pair_oracle_and_trapezoid(
            scores in proptest::collection::vec(-5.0f64..5.0, 8..40),
            labels in proptest::collection::vec(any::<bool>(), 8..40),
        ) {
            let n = scores.len().min(labels.len());
            let outcomes: Vec<_> = (0..n)
                .map(|i| outcome(labels[i], (scores[i] * 4.0).round() / 4.0))
                .collect();
            let n_pos = outcomes.iter().filter(|o| o.label).count();
            prop_assume!(n_pos > 0 && n_pos < n);
            let a = auc(&outcomes).unwrap();
            prop_assert!((a - auc_pairs(&outcomes)).abs() < 1e-12);
            prop_assert!((a - auc_trapezoidal(&outcomes).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_under_monotone_transform(
            scores in proptest::collection::vec(-3.0f64..3.0, 6..30),
            labels in proptest::collection::vec(any::<bool>(), 6..30),
        ) {
            let n = scores.len().min(labels.len());
            let outcomes: Vec<_> = (0..n).map(|i| outcome(labels[i], scores[i])).collect();
            let n_pos = outcomes.iter().filter(|o| o.label).count();
            prop_assume!(n_pos > 0 && n_pos < n);
            let transformed: Vec<_> = outcomes
                .iter()
                .map(|o| outcome(o.label, o.score.exp() + 3.0 * o.score))
                .collect();
            let a = auc(&outcomes).unwrap();
            let b = auc(&transformed).unwrap();
            prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }

        #[test]
        fn auc_symmetric_under_label_flip_and_negation(
            scores in proptest::collection::vec(-3.0f64..3.0, 6..30),
            labels in proptest::collection::vec(any::<bool>(), 6..30),
        ) {
            let n = scores.len().min(labels.len());
            let outcomes: Vec<_> = (0..n).map(|i| outcome(labels[i], scores[i])).collect();
            let n_pos = outcomes.iter().filter(|o| o.label).count();
            prop_assume!(n_pos > 0 && n_pos < n);
            let flipped: Vec<_> = outcomes
                .iter()
                .map(|o| outcome(!o.label, -o.score))
                .collect();
            let a = auc(&outcomes).unwrap();
            let b = auc(&flipped).unwrap();
            prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }

        #[test]
        fn f1_equals_precision_when_balanced(tp in 1usize..100, err in 0usize..50) {
            // fp == fn ⇒ precision == recall ⇒ f1 equals both
            let cm = ConfusionMatrix {
                true_pos: tp,
                false_pos: err,
                true_neg: 3,
                false_neg: err,
            };
            let p = precision(&cm).unwrap();
            let f = f1(&cm).unwrap();
            prop_assert!((f - p).abs() < 1e-12);
        }
    }
}
