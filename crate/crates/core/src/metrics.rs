//! Classification and segmentation metrics: ACC/SPE/SEN at a threshold,
//! threshold-free AUC, and per-class Dice overlap.

use serde::{Deserialize, Serialize};

use crate::autograd::Arr;
use crate::error::{Error, Result};

/// Metric bundle for one evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub spe: f64,
    pub sen: f64,
    pub auc: f64,
    /// Per-class Dice scores; empty when no masks were evaluated.
    pub dice: Vec<f64>,
    pub threshold: f64,
    pub n_samples: usize,
}

/// Area under the ROC curve as the Mann-Whitney statistic, computed through
/// average ranks so ties contribute one half.
pub fn auc(probs: &[f64], labels: &[u8]) -> Result<f64> {
    assert_eq!(probs.len(), labels.len(), "auc: length mismatch");
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    // average ranks over tie groups (1-based)
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && probs[order[j + 1]] == probs[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Dice overlap `2|P n G| / (|P| + |G|)` with both masks binarized at 0.5.
/// Two empty masks score 1 by convention.
pub fn dice_score(pred: &Arr, gt: &Arr) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::DimMismatch {
            context: "dice_score".into(),
            expected: format!("{:?}", gt.shape()),
            got: format!("{:?}", pred.shape()),
        });
    }
    let mut inter = 0usize;
    let mut p_count = 0usize;
    let mut g_count = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let p = p >= 0.5;
        let g = g >= 0.5;
        p_count += p as usize;
        g_count += g as usize;
        inter += (p && g) as usize;
    }
    if p_count + g_count == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p_count + g_count) as f64)
}

/// Confusion counts at a threshold (probability >= threshold is positive).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn confusion_counts(probs: &[f64], labels: &[u8], threshold: f64) -> Confusion {
    let mut c = Confusion {
        tp: 0,
        tn: 0,
        fp: 0,
        fn_: 0,
    };
    for (&p, &y) in probs.iter().zip(labels) {
        let pred = p >= threshold;
        match (pred, y == 1) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

/// ACC/SEN/SPE from confusion counts at the threshold plus threshold-free
/// AUC. Requires both classes; otherwise SEN or SPE would be undefined.
pub fn compute_metrics(probs: &[f64], labels: &[u8], threshold: f64) -> Result<MetricsReport> {
    let n = labels.len();
    let c = confusion_counts(probs, labels, threshold);
    if c.tp + c.fn_ == 0 || c.tn + c.fp == 0 {
        return Err(Error::SingleClass);
    }
    Ok(MetricsReport {
        acc: (c.tp + c.tn) as f64 / n as f64,
        sen: c.tp as f64 / (c.tp + c.fn_) as f64,
        spe: c.tn as f64 / (c.tn + c.fp) as f64,
        auc: auc(probs, labels)?,
        dice: Vec::new(),
        threshold,
        n_samples: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::IxDyn;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive pair-enumeration oracle: fraction of (positive, negative)
    /// pairs ranked correctly, ties counting one half.
    fn auc_pairs_oracle(probs: &[f64], labels: &[u8]) -> f64 {
        let mut good = 0.0;
        let mut total = 0.0;
        for (i, &yi) in labels.iter().enumerate() {
            if yi != 1 {
                continue;
            }
            for (j, &yj) in labels.iter().enumerate() {
                if yj != 0 {
                    continue;
                }
                total += 1.0;
                if probs[i] > probs[j] {
                    good += 1.0;
                } else if probs[i] == probs[j] {
                    good += 0.5;
                }
            }
        }
        good / total
    }

    #[test]
    fn auc_separated_is_one() {
        let probs = [0.9, 0.8, 0.2, 0.1];
        let labels = [1, 1, 0, 0];
        assert_abs_diff_eq!(auc(&probs, &labels).unwrap(), 1.0, epsilon = 0.0);
    }

    #[test]
    fn auc_all_ties_is_half() {
        let probs = [0.4; 6];
        let labels = [1, 0, 1, 0, 0, 1];
        assert_abs_diff_eq!(auc(&probs, &labels).unwrap(), 0.5, epsilon = 0.0);
    }

    #[test]
    fn auc_worked_example() {
        let probs = [0.1, 0.4, 0.35, 0.8];
        let labels = [0, 0, 1, 1];
        assert_abs_diff_eq!(auc(&probs, &labels).unwrap(), 0.75, epsilon = 0.0);
    }

    #[test]
    fn auc_single_class_is_error() {
        assert!(matches!(auc(&[0.1, 0.9], &[1, 1]), Err(Error::SingleClass)));
    }

    #[test]
    fn auc_matches_pair_oracle_exhaustively() {
        // every labeling of n <= 6 samples with distinct scores
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for n in 2..=6usize {
            let mut probs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            probs.sort_by(f64::total_cmp);
            probs.dedup();
            assert_eq!(probs.len(), n, "scores must be distinct");
            for bits in 1..(1u32 << n) - 1 {
                let labels: Vec<u8> = (0..n).map(|i| ((bits >> i) & 1) as u8).collect();
                let got = auc(&probs, &labels).unwrap();
                let want = auc_pairs_oracle(&probs, &labels);
                assert_eq!(got, want, "n={n} bits={bits:b}");
            }
        }
    }

    #[test]
    fn auc_matches_pair_oracle_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..50 {
            let n = rng.gen_range(3..10);
            // draw from a tiny grid so ties are common
            let probs: Vec<f64> = (0..n).map(|_| rng.gen_range(0..4) as f64 / 4.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            labels[0] = 1;
            labels[1] = 0;
            let got = auc(&probs, &labels).unwrap();
            let want = auc_pairs_oracle(&probs, &labels);
            assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transform(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(4..12);
            let probs: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            labels[0] = 1;
            labels[1] = 0;
            let base = auc(&probs, &labels).unwrap();
            let squashed: Vec<f64> = probs.iter().map(|&p| p.exp()).collect();
            prop_assert_eq!(base, auc(&squashed, &labels).unwrap());
        }

        #[test]
        fn auc_complement_without_ties(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(4..12);
            let mut probs: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            probs.sort_by(f64::total_cmp);
            probs.dedup();
            let n = probs.len();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            labels[0] = 1;
            labels[1] = 0;
            let fwd = auc(&probs, &labels).unwrap();
            let neg: Vec<f64> = probs.iter().map(|&p| -p).collect();
            let rev = auc(&neg, &labels).unwrap();
            prop_assert!((fwd + rev - 1.0).abs() < 1e-12);
        }
    }

    fn mask_from(bits: &[&[u8]]) -> Arr {
        let h = bits.len();
        let w = bits[0].len();
        let mut a = Arr::zeros(IxDyn(&[h, w]));
        for (y, row) in bits.iter().enumerate() {
            for (x, &v) in row.iter().enumerate() {
                a[[y, x]] = v as f64;
            }
        }
        a
    }

    #[test]
    fn dice_identical_masks() {
        let m = mask_from(&[&[1, 1, 0], &[0, 1, 0]]);
        assert_eq!(dice_score(&m, &m).unwrap(), 1.0);
    }

    #[test]
    fn dice_disjoint_masks() {
        let a = mask_from(&[&[1, 0], &[0, 0]]);
        let b = mask_from(&[&[0, 1], &[1, 1]]);
        assert_eq!(dice_score(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn dice_counting_oracle() {
        // P has 2 pixels, G has 4, sharing exactly 1 -> 2*1/(2+4) = 1/3
        let p = mask_from(&[&[1, 1, 0, 0], &[0, 0, 0, 0]]);
        let g = mask_from(&[&[1, 0, 1, 1], &[1, 0, 0, 0]]);
        assert_abs_diff_eq!(dice_score(&p, &g).unwrap(), 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn dice_empty_convention_and_symmetry() {
        let z = mask_from(&[&[0, 0], &[0, 0]]);
        assert_eq!(dice_score(&z, &z).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let a = Arr::from_shape_fn(IxDyn(&[3, 4]), |_| rng.gen_range(0.0..1.0));
            let b = Arr::from_shape_fn(IxDyn(&[3, 4]), |_| rng.gen_range(0.0..1.0));
            assert_eq!(dice_score(&a, &b).unwrap(), dice_score(&b, &a).unwrap());
        }
    }

    #[test]
    fn dice_shape_mismatch() {
        let a = mask_from(&[&[1, 0]]);
        let b = mask_from(&[&[1], &[0]]);
        assert!(dice_score(&a, &b).is_err());
    }

    #[test]
    fn metrics_all_correct() {
        let probs = [0.9, 0.8, 0.1, 0.2];
        let labels = [1, 1, 0, 0];
        let m = compute_metrics(&probs, &labels, 0.5).unwrap();
        assert_eq!(m.acc, 1.0);
        assert_eq!(m.sen, 1.0);
        assert_eq!(m.spe, 1.0);
        assert_eq!(m.auc, 1.0);
        assert_eq!(m.n_samples, 4);
    }

    #[test]
    fn metrics_two_sample_case() {
        let m = compute_metrics(&[0.6, 0.4], &[1, 0], 0.5).unwrap();
        assert_eq!((m.acc, m.sen, m.spe, m.auc), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn metrics_match_brute_force_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..50 {
            let n = 6;
            let probs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            labels[0] = 1;
            labels[1] = 0;
            let m = compute_metrics(&probs, &labels, 0.5).unwrap();
            // brute force
            let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
            for i in 0..n {
                match (probs[i] >= 0.5, labels[i] == 1) {
                    (true, true) => tp += 1,
                    (false, false) => tn += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                }
            }
            assert_eq!(tp + tn + fp + fn_, n);
            assert_eq!(m.acc, (tp + tn) as f64 / n as f64);
            assert_eq!(m.sen, tp as f64 / (tp + fn_) as f64);
            assert_eq!(m.spe, tn as f64 / (tn + fp) as f64);
        }
    }

    #[test]
    fn metrics_single_class_is_error() {
        assert!(compute_metrics(&[0.9, 0.8], &[1, 1], 0.5).is_err());
    }
}
