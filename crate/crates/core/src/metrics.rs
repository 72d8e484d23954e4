//! Regression error, ranking AUC and inverse-prevalence-weighted F1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub rmse: f64,
    /// Weighted F1 on a 0–100 scale.
    pub ipw_f1: f64,
    pub n_samples: usize,
    pub stage_threshold: f64,
}

pub fn rmse(y_hat: &[f64], y: &[f64]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::Data("rmse of an empty sample".into()));
    }
    if y_hat.len() != y.len() {
        return Err(Error::shape("rmse", &[y_hat.len()], &[y.len()]));
    }
    let mse = y_hat.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64;
    Ok(mse.sqrt())
}

/// `1` where the score strictly exceeds `threshold`.
pub fn stage_labels(y: &[f64], threshold: f64) -> Vec<u8> {
    y.iter().map(|&v| u8::from(v > threshold)).collect()
}

pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Data("median of an empty sample".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    (pos, labels.len() - pos)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from midranks in `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc", &[scores.len()], &[labels.len()]));
    }
    let (n_pos, n_neg) = class_counts(labels);
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("auc needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let midrank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                pos_rank_sum += midrank;
            }
        }
        i = j + 1;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// F1 with every sample weighted by the inverse prevalence of its true
/// class, scaled to 0–100.
pub fn ipw_f1(pred: &[u8], truth: &[u8]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape("ipw_f1", &[pred.len()], &[truth.len()]));
    }
    let (n_pos, n_neg) = class_counts(truth);
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("ipw_f1 needs both true classes".into()));
    }
    let n = truth.len() as f64;
    let w_pos = n / n_pos as f64;
    let w_neg = n / n_neg as f64;
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == 1, t == 1) {
            (true, true) => tp += w_pos,
            (true, false) => fp += w_neg,
            (false, true) => fn_ += w_pos,
            (false, false) => {}
        }
    }
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = tp / (tp + fn_);
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(100.0 * 2.0 * precision * recall / (precision + recall))
}

/// Scores a split: RMSE on raw values, AUC of `y_hat` against the true
/// stage labels, and IPW-F1 of `y_hat > threshold` against them.
pub fn evaluate(y_hat: &[f64], y: &[f64], threshold: f64) -> Result<MetricsReport> {
    let truth = stage_labels(y, threshold);
    let pred = stage_labels(y_hat, threshold);
    Ok(MetricsReport {
        auc: auc(y_hat, &truth)?,
        rmse: rmse(y_hat, y)?,
        ipw_f1: ipw_f1(&pred, &truth)?,
        n_samples: y.len(),
        stage_threshold: threshold,
    })
}

/// Brute-force reference implementations, kept separate from the fast
/// paths above.
pub mod oracle {
    /// Pairwise concordance over every (positive, negative) pair.
    pub fn auc_pairwise(scores: &[f64], labels: &[u8]) -> f64 {
        let mut credit = 0.0;
        let mut pairs = 0usize;
        for (i, &li) in labels.iter().enumerate() {
            if li != 1 {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj != 0 {
                    continue;
                }
                pairs += 1;
                if scores[i] > scores[j] {
                    credit += 1.0;
                } else if scores[i] == scores[j] {
                    credit += 0.5;
                }
            }
        }
        credit / pairs as f64
    }

    /// Weighted confusion counts via explicit per-sample weights, then
    /// `F1 = 2TP / (2TP + FP + FN)`.
    pub fn ipw_f1_confusion(pred: &[u8], truth: &[u8]) -> f64 {
        let n = truth.len() as f64;
        let prevalence = |c: u8| truth.iter().filter(|&&t| t == c).count() as f64 / n;
        let weights: Vec<f64> = truth.iter().map(|&t| 1.0 / prevalence(t)).collect();
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        for k in 0..truth.len() {
            let w = weights[k];
            tp += w * f64::from(pred[k] & truth[k]);
            fp += w * f64::from(pred[k] & (1 - truth[k]));
            fn_ += w * f64::from((1 - pred[k]) & truth[k]);
        }
        let denom = 2.0 * tp + fp + fn_;
        if denom == 0.0 || tp == 0.0 {
            0.0
        } else {
            100.0 * 2.0 * tp / denom
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rmse_cases() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[4.0, 5.0, 6.0], &[1.0, 2.0, 3.0]).unwrap(), 3.0);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert!(matches!(rmse(&[], &[]), Err(Error::Data(_))));
    }

    #[test]
    fn stage_label_boundaries() {
        assert_eq!(stage_labels(&[1.0, 2.0], 5.0), vec![0, 0]);
        assert_eq!(stage_labels(&[-1e300, 2.0], f64::NEG_INFINITY), vec![1, 1]);
        assert_eq!(stage_labels(&[1.0, 5.0, 9.0], 5.0), vec![0, 0, 1]);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[3.0; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.8, 0.7, 0.1], &[1, 0, 1, 0]).unwrap(), 0.75);
        assert_eq!(oracle::auc_pairwise(&[0.9, 0.8, 0.7, 0.1], &[1, 0, 1, 0]), 0.75);
        assert!(matches!(auc(&[1.0, 2.0], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ipw_f1_cases() {
        assert_eq!(ipw_f1(&[1, 0, 1, 0], &[1, 0, 1, 0]).unwrap(), 100.0);
        assert_eq!(ipw_f1(&[0, 1, 0, 1], &[1, 0, 1, 0]).unwrap(), 0.0);
        let v = ipw_f1(&[1, 0, 1, 0, 0, 0], &[1, 1, 0, 0, 0, 0]).unwrap();
        // P = 3/4.5 = 2/3, R = 1/2 ⇒ F1 = 4/7
        assert!((v - 400.0 / 7.0).abs() < 1e-12);
        assert!((v - 57.14).abs() < 5e-3);
        assert!(matches!(ipw_f1(&[1, 0], &[0, 0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn evaluate_perfect_and_constant() {
        let y = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0];
        let thr = median(&y).unwrap();
        let r = evaluate(&y, &y, thr).unwrap();
        assert_eq!((r.rmse, r.auc, r.ipw_f1, r.n_samples), (0.0, 1.0, 100.0, 6));

        let c = [100.0; 6];
        let r = evaluate(&c, &y, thr).unwrap();
        assert_eq!(r.auc, 0.5);
        let truth = stage_labels(&y, thr);
        assert_eq!(r.ipw_f1, ipw_f1(&[1; 6], &truth).unwrap());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..=50).prop_flat_map(|n| {
            (
                prop::collection::vec((0u8..8).prop_map(|v| v as f64 * 0.5), n),
                prop::collection::vec(0u8..=1, n),
            )
        })
        .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_oracle((s, l) in instance()) {
            prop_assert_eq!(auc(&s, &l).unwrap(), oracle::auc_pairwise(&s, &l));
        }

        #[test]
        fn ipw_f1_matches_confusion_oracle((p, t) in (2usize..=50).prop_flat_map(|n| (
            prop::collection::vec(0u8..=1, n), prop::collection::vec(0u8..=1, n)))
            .prop_filter("both classes", |(_, t)| t.contains(&0) && t.contains(&1)))
        {
            let fast = ipw_f1(&p, &t).unwrap();
            let slow = oracle::ipw_f1_confusion(&p, &t);
            prop_assert!((fast - slow).abs() < 1e-12, "{} vs {}", fast, slow);
        }

        #[test]
        fn auc_monotone_invariance((s, l) in instance()) {
            let t: Vec<f64> = s.iter().map(|v| (v * 0.7).exp() + 3.0 * v).collect();
            prop_assert_eq!(auc(&s, &l).unwrap(), auc(&t, &l).unwrap());
        }

        #[test]
        fn ipw_f1_duplication_invariance((p, t) in (2usize..=30).prop_flat_map(|n| (
            prop::collection::vec(0u8..=1, n), prop::collection::vec(0u8..=1, n)))
            .prop_filter("both classes", |(_, t)| t.contains(&0) && t.contains(&1)),
            k in 2usize..5)
        {
            let pk: Vec<u8> = p.iter().copied().cycle().take(p.len() * k).collect();
            let tk: Vec<u8> = t.iter().copied().cycle().take(t.len() * k).collect();
            prop_assert!((ipw_f1(&p, &t).unwrap() - ipw_f1(&pk, &tk).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn rmse_symmetric_and_homogeneous(
            a in prop::collection::vec(-100.0f64..100.0, 1..40),
            c in 0.01f64..10.0,
        ) {
            let b: Vec<f64> = a.iter().map(|v| v * 0.5 - 1.0).collect();
            prop_assert_eq!(rmse(&a, &b).unwrap(), rmse(&b, &a).unwrap());
            let ac: Vec<f64> = a.iter().map(|v| v * c).collect();
            let bc: Vec<f64> = b.iter().map(|v| v * c).collect();
            let lhs = rmse(&ac, &bc).unwrap();
            let rhs = c * rmse(&a, &b).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.max(1.0));
        }
    }

    #[test]
    fn auc_complement_without_ties() {
        let s = [0.3, 1.2, -0.4, 2.2, 0.9, 1.7];
        let l = [0, 1, 0, 1, 1, 0];
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        assert_eq!(auc(&s, &l).unwrap() + auc(&neg, &l).unwrap(), 1.0);
    }
}
