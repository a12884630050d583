//! Evaluation metrics: accuracy and rank-based ROC AUC, both in percent.

use crate::error::{GttaError, Result};
use serde::{Deserialize, Serialize};

/// 100 · (matches / n).
pub fn accuracy(pred_labels: &[u8], true_labels: &[u8]) -> Result<f64> {
    if pred_labels.is_empty() || pred_labels.len() != true_labels.len() {
        return Err(GttaError::EmptyEval);
    }
    let matches = pred_labels
        .iter()
        .zip(true_labels)
        .filter(|(a, b)| a == b)
        .count();
    Ok(100.0 * matches as f64 / pred_labels.len() as f64)
}

/// Mann–Whitney ROC AUC with midrank tie handling, O(n log n):
/// 100 · (P(score⁺ > score⁻) + ½·P(tie)).
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(GttaError::EmptyEval);
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(GttaError::SingleClassEval);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the midrank
        let midrank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(100.0 * u / (n_pos as f64 * n_neg as f64))
}

/// ACC/AUC for one domain, in percent.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DomainEval {
    pub domain: String,
    pub acc: f64,
    pub auc: f64,
}

/// Per-domain results of one run; the average row is the unweighted mean.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalResult {
    pub domains: Vec<DomainEval>,
}

impl EvalResult {
    pub fn avg(&self) -> (f64, f64) {
        let n = self.domains.len() as f64;
        let acc = self.domains.iter().map(|d| d.acc).sum::<f64>() / n;
        let auc = self.domains.iter().map(|d| d.auc).sum::<f64>() / n;
        (acc, auc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn accuracy_trivial_cases() {
        assert_eq!(accuracy(&[1, 0, 1], &[1, 0, 1]).unwrap(), 100.0);
        assert_eq!(accuracy(&[0, 1], &[1, 0]).unwrap(), 0.0);
        assert!(matches!(accuracy(&[], &[]), Err(GttaError::EmptyEval)));
    }

    #[test]
    fn accuracy_matches_loop_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = r.random_range(1..200usize);
            let pred: Vec<u8> = (0..n).map(|_| r.random_range(0..2) as u8).collect();
            let truth: Vec<u8> = (0..n).map(|_| r.random_range(0..2) as u8).collect();
            let mut count = 0usize;
            for i in 0..n {
                if pred[i] == truth[i] {
                    count += 1;
                }
            }
            let got = accuracy(&pred, &truth).unwrap();
            assert!((got - 100.0 * count as f64 / n as f64).abs() <= 1e-12);
        }
    }

    #[test]
    fn auc_perfect_and_all_ties() {
        let labels = [0u8, 0, 1, 1];
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 100.0);
        assert_eq!(roc_auc(&[0.5, 0.5, 0.5, 0.5], &labels).unwrap(), 50.0);
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[1, 1]),
            Err(GttaError::SingleClassEval)
        ));
    }

    fn pair_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        100.0 * num / pairs
    }

    #[test]
    fn auc_matches_pair_oracle_with_ties() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        for case in 0..60 {
            let n = if case < 3 { 500 } else { r.random_range(5..80usize) };
            let labels: Vec<u8> = (0..n)
                .map(|i| if i < 2 { (i % 2) as u8 } else { r.random_range(0..2) as u8 })
                .collect();
            // quantized scores force plenty of ties
            let scores: Vec<f64> = (0..n)
                .map(|_| (r.random_range(0..12) as f64) / 12.0)
                .collect();
            let got = roc_auc(&scores, &labels).unwrap();
            let expect = pair_oracle(&scores, &labels);
            assert!((got - expect).abs() < 1e-10, "case {case}: {got} vs {expect}");
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform_and_permutation() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..30 {
            let n = r.random_range(6..60usize);
            let labels: Vec<u8> = (0..n)
                .map(|i| if i < 2 { (i % 2) as u8 } else { r.random_range(0..2) as u8 })
                .collect();
            let scores: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
            let base = roc_auc(&scores, &labels).unwrap();

            let warped: Vec<f64> = scores.iter().map(|&s| (3.0 * s).exp() + 1.0).collect();
            assert!((roc_auc(&warped, &labels).unwrap() - base).abs() <= 1e-10);

            let mut perm: Vec<usize> = (0..n).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut r);
            let ps: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
            let pl: Vec<u8> = perm.iter().map(|&i| labels[i]).collect();
            assert!((roc_auc(&ps, &pl).unwrap() - base).abs() <= 1e-10);
        }
    }

    #[test]
    fn eval_result_average_is_arithmetic_mean() {
        let res = EvalResult {
            domains: vec![
                DomainEval { domain: "a".into(), acc: 60.0, auc: 70.0 },
                DomainEval { domain: "b".into(), acc: 80.0, auc: 90.0 },
            ],
        };
        assert_eq!(res.avg(), (70.0, 80.0));
    }
}
