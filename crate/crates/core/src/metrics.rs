//! ROC analysis and paired/unpaired significance tests.
//!
//! Classification convention throughout: a sample is called positive iff
//! its score is `>=` the threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn class_counts(labels: &[u8]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.iter().filter(|&&l| l == 0).count();
    if pos + neg != labels.len() {
        return Err(Error::Data("labels must be 0 or 1".into()));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate(format!(
            "need both classes, got {pos} positive and {neg} negative"
        )));
    }
    Ok((pos, neg))
}

fn check_pairs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Pairing(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data("scores contain NaN".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Descending; the first entry is +inf (nothing called positive).
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    /// Cumulative counts behind each point.
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    pub positives: usize,
    pub negatives: usize,
}

impl RocCurve {
    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }

    /// Trapezoidal area, evaluated on integer counts.
    pub fn trapezoid_area(&self) -> f64 {
        let mut twice = 0u128;
        for i in 1..self.len() {
            let dx = (self.fp[i] - self.fp[i - 1]) as u128;
            twice += dx * (self.tp[i] + self.tp[i - 1]) as u128;
        }
        twice as f64 / (2.0 * self.positives as f64 * self.negatives as f64)
    }
}

/// One point per distinct score, plus the (0, 0) origin.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    check_pairs(scores, labels)?;
    let (p, n) = class_counts(labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut curve = RocCurve {
        thresholds: vec![f64::INFINITY],
        fpr: vec![0.0],
        tpr: vec![0.0],
        tp: vec![0],
        fp: vec![0],
        positives: p,
        negatives: n,
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.thresholds.push(s);
        curve.tp.push(tp);
        curve.fp.push(fp);
        curve.tpr.push(tp as f64 / p as f64);
        curve.fpr.push(fp as f64 / n as f64);
    }
    Ok(curve)
}

/// Tie-aware rank statistic: probability that a random positive outscores
/// a random negative, ties counted as one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_pairs(scores, labels)?;
    let (p, n) = class_counts(labels)?;
    let ranks = midranks(scores);
    // twice the positive rank sum keeps half-integer midranks exact
    let twice_rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(r, _)| 2.0 * r)
        .sum();
    let twice_u = twice_rank_sum - (p * (p + 1)) as f64;
    Ok(twice_u / (2.0 * p as f64 * n as f64))
}

/// 1-based ranks with ties sharing their mean rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub youden_j: f64,
}

/// Curve point with maximal Youden J = TPR - FPR; ties go to the lower FPR.
pub fn operating_point(curve: &RocCurve) -> OperatingPoint {
    let (p, n) = (curve.positives as i128, curve.negatives as i128);
    // J * P * N, exact in integers
    let score = |i: usize| curve.tp[i] as i128 * n - curve.fp[i] as i128 * p;
    let mut best = 0;
    for i in 1..curve.len() {
        let (si, sb) = (score(i), score(best));
        if si > sb || (si == sb && curve.fp[i] < curve.fp[best]) {
            best = i;
        }
    }
    OperatingPoint {
        threshold: curve.thresholds[best],
        sensitivity: curve.tpr[best],
        specificity: 1.0 - curve.fpr[best],
        youden_j: curve.tpr[best] - curve.fpr[best],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
}

pub fn confusion_stats(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Confusion> {
    check_pairs(scores, labels)?;
    let (p, n) = class_counts(labels)?;
    let (mut tp, mut tn) = (0usize, 0usize);
    for (s, l) in scores.iter().zip(labels) {
        let called = *s >= threshold;
        match (called, *l) {
            (true, 1) => tp += 1,
            (false, 0) => tn += 1,
            _ => {}
        }
    }
    Ok(Confusion {
        sensitivity: tp as f64 / p as f64,
        specificity: tn as f64 / n as f64,
        accuracy: (tp + tn) as f64 / (p + n) as f64,
    })
}

/// Upper tail of the chi-square distribution with one degree of freedom.
pub fn chi2_1df_sf(chi2: f64) -> f64 {
    if chi2 <= 0.0 {
        return 1.0;
    }
    libm::erfc((chi2 / 2.0).sqrt())
}

/// Two-sided normal tail probability for a z statistic.
pub fn normal_two_sided(z: f64) -> f64 {
    libm::erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNemar {
    /// A correct, B wrong.
    pub b: usize,
    /// A wrong, B correct.
    pub c: usize,
    pub chi2: f64,
    pub p_value: f64,
}

/// Continuity-corrected McNemar test on paired correctness indicators.
pub fn mcnemar(correct_a: &[bool], correct_b: &[bool]) -> Result<McNemar> {
    if correct_a.len() != correct_b.len() {
        return Err(Error::Pairing(format!(
            "{} vs {} paired outcomes",
            correct_a.len(),
            correct_b.len()
        )));
    }
    let mut b = 0;
    let mut c = 0;
    for (&a, &bb) in correct_a.iter().zip(correct_b) {
        match (a, bb) {
            (true, false) => b += 1,
            (false, true) => c += 1,
            _ => {}
        }
    }
    Ok(mcnemar_from_counts(b, c))
}

pub fn mcnemar_from_counts(b: usize, c: usize) -> McNemar {
    if b + c == 0 {
        return McNemar {
            b,
            c,
            chi2: 0.0,
            p_value: 1.0,
        };
    }
    let diff = (b as f64 - c as f64).abs();
    let chi2 = (diff - 1.0).max(0.0).powi(2) / (b + c) as f64;
    McNemar {
        b,
        c,
        chi2,
        p_value: chi2_1df_sf(chi2),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U statistic of the first sample.
    pub u: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Pooled sizes up to this use exact enumeration of rank assignments.
pub const WMW_EXACT_LIMIT: usize = 10;

/// Two-sided Wilcoxon–Mann–Whitney rank-sum test with midranks.
pub fn wilcoxon_mann_whitney(x: &[f64], y: &[f64]) -> Result<MannWhitney> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Degenerate("both samples must be non-empty".into()));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::Data("samples contain NaN".into()));
    }
    let (nx, ny) = (x.len(), y.len());
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let ranks = midranks(&pooled);
    // doubled statistics stay integral under midranks
    let twice_rx: f64 = ranks[..nx].iter().map(|r| 2.0 * r).sum();
    let twice_u = twice_rx - (nx * (nx + 1)) as f64;
    let twice_mu = (nx * ny) as f64;
    let u = twice_u / 2.0;

    if nx + ny <= WMW_EXACT_LIMIT {
        let observed = (twice_u - twice_mu).abs();
        let twice_ranks: Vec<f64> = ranks.iter().map(|r| 2.0 * r).collect();
        let (mut extreme, mut total) = (0u64, 0u64);
        for_each_combination(nx + ny, nx, |chosen| {
            let s: f64 = chosen.iter().map(|&i| twice_ranks[i]).sum();
            let tu = s - (nx * (nx + 1)) as f64;
            total += 1;
            if (tu - twice_mu).abs() >= observed - 1e-9 {
                extreme += 1;
            }
        });
        return Ok(MannWhitney {
            u,
            p_value: extreme as f64 / total as f64,
            exact: true,
        });
    }

    let n = (nx + ny) as f64;
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = (nx * ny) as f64 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    let p_value = if var <= 0.0 {
        1.0
    } else {
        let z = ((u - twice_mu / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
        normal_two_sided(z)
    };
    Ok(MannWhitney {
        u,
        p_value,
        exact: false,
    })
}

fn for_each_combination(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        let Some(i) = (0..k).rev().find(|&i| idx[i] < i + n - k) else {
            return;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn split(pos: &[f64], neg: &[f64]) -> (Vec<f64>, Vec<u8>) {
        let mut s = pos.to_vec();
        s.extend_from_slice(neg);
        let mut l = vec![1u8; pos.len()];
        l.extend(vec![0u8; neg.len()]);
        (s, l)
    }

    /// Brute-force pairwise AUC.
    fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] != 1 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] != 0 {
                    continue;
                }
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
        num / den
    }

    #[test]
    fn roc_examples() {
        let (s, l) = split(&[0.9, 0.8], &[0.2, 0.1]);
        let c = roc_curve(&s, &l).unwrap();
        assert!(c
            .fpr
            .iter()
            .zip(&c.tpr)
            .any(|(&f, &t)| f == 0.0 && t == 1.0));

        let (s, l) = split(&[0.4, 0.4], &[0.4]);
        let c = roc_curve(&s, &l).unwrap();
        assert_eq!(
            (c.fpr.clone(), c.tpr.clone()),
            (vec![0.0, 1.0], vec![0.0, 1.0])
        );
        assert_eq!(c.trapezoid_area(), 0.5);

        let (s, l) = split(&[0.8, 0.3], &[0.5, 0.1]);
        let c = roc_curve(&s, &l).unwrap();
        let pts: Vec<(f64, f64)> = c.fpr.iter().copied().zip(c.tpr.iter().copied()).collect();
        assert!(pts.contains(&(0.0, 0.5)));
        assert!(pts.contains(&(0.5, 0.5)));
        assert_eq!(*pts.last().unwrap(), (1.0, 1.0));

        assert!(matches!(
            roc_curve(&[0.1, 0.2], &[1, 1]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn auc_examples() {
        let (s, l) = split(&[0.9, 0.8], &[0.2, 0.1]);
        assert_eq!(auc(&s, &l).unwrap(), 1.0);
        let (s, l) = split(&[0.6], &[0.6]);
        assert_eq!(auc(&s, &l).unwrap(), 0.5);
        let (s, l) = split(&[0.8, 0.3], &[0.5, 0.1]);
        assert_eq!(auc(&s, &l).unwrap(), 0.75);
        assert!(matches!(auc(&[0.3], &[0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn operating_point_examples() {
        let (s, l) = split(&[0.9, 0.8], &[0.2, 0.1]);
        let op = operating_point(&roc_curve(&s, &l).unwrap());
        assert_eq!((op.sensitivity, op.specificity), (1.0, 1.0));

        let (s, l) = split(&[0.9, 0.8, 0.4], &[0.7, 0.3, 0.2]);
        let op = operating_point(&roc_curve(&s, &l).unwrap());
        assert_eq!(op.threshold, 0.8);
        assert!((op.sensitivity - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(op.specificity, 1.0);

        let (s, l) = split(&[0.5, 0.5], &[0.5, 0.5]);
        let op = operating_point(&roc_curve(&s, &l).unwrap());
        assert_eq!(op.youden_j, 0.0);
        assert_eq!(op.threshold, f64::INFINITY);
        assert_eq!((op.sensitivity, op.specificity), (0.0, 1.0));
    }

    #[test]
    fn confusion_examples() {
        let (s, l) = split(&[0.8, 0.3], &[0.5, 0.1]);
        let low = confusion_stats(&s, &l, 0.0).unwrap();
        assert_eq!((low.sensitivity, low.specificity), (1.0, 0.0));
        let high = confusion_stats(&s, &l, 0.95).unwrap();
        assert_eq!((high.sensitivity, high.specificity), (0.0, 1.0));
        let mid = confusion_stats(&s, &l, 0.5).unwrap();
        assert_eq!(
            (mid.sensitivity, mid.specificity, mid.accuracy),
            (0.5, 0.5, 0.5)
        );
    }

    #[test]
    fn mcnemar_examples() {
        let m = mcnemar_from_counts(15, 5);
        assert!((m.chi2 - 4.05).abs() < 1e-12);
        assert!((m.p_value - 0.0441).abs() < 5e-4);
        assert_eq!(mcnemar_from_counts(7, 7).p_value, 1.0);
        assert_eq!(mcnemar_from_counts(0, 0).p_value, 1.0);

        let a = [true, true, false, false, true];
        let b = [false, true, true, false, false];
        let ab = mcnemar(&a, &b).unwrap();
        let ba = mcnemar(&b, &a).unwrap();
        assert_eq!((ab.b, ab.c), (ba.c, ba.b));
        assert_eq!((ab.chi2, ab.p_value), (ba.chi2, ba.p_value));
        assert!(matches!(mcnemar(&a, &b[..3]), Err(Error::Pairing(_))));
    }

    #[test]
    fn wmw_examples() {
        let r = wilcoxon_mann_whitney(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(r.u, 0.0);
        assert!(r.exact);
        assert_eq!(r.p_value, 0.1);

        let x: Vec<f64> = (0..30).map(|i| (i % 7) as f64).collect();
        let same = wilcoxon_mann_whitney(&x, &x).unwrap();
        assert!(same.p_value >= 0.99);

        let y: Vec<f64> = (0..25).map(|i| (i % 5) as f64 + 0.5).collect();
        let xy = wilcoxon_mann_whitney(&x, &y).unwrap();
        let yx = wilcoxon_mann_whitney(&y, &x).unwrap();
        assert!((xy.p_value - yx.p_value).abs() < 1e-12);
        assert!(matches!(
            wilcoxon_mann_whitney(&[], &[1.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn wmw_exact_matches_brute_force_small_ties() {
        let x = [1.0, 2.0, 2.0, 5.0];
        let y = [2.0, 3.0, 3.0];
        let r = wilcoxon_mann_whitney(&x, &y).unwrap();
        let yx = wilcoxon_mann_whitney(&y, &x).unwrap();
        assert!((r.p_value - yx.p_value).abs() < 1e-12);
        assert!(r.p_value > 0.0 && r.p_value <= 1.0);
    }

    #[test]
    fn trapezoid_matches_pairwise_with_ties() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..300 {
            let n = rng.random_range(2..=200);
            let levels = rng.random_range(2..=20);
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let scores: Vec<f64> = (0..n)
                .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
                .collect();
            let brute = pairwise_auc(&scores, &labels);
            let curve = roc_curve(&scores, &labels).unwrap();
            assert!((curve.trapezoid_area() - brute).abs() < 1e-12);
            assert!((auc(&scores, &labels).unwrap() - brute).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn auc_rank_invariances(
            data in prop::collection::vec((-5.0f64..5.0, 0u8..=1), 2..80)
        ) {
            let mut labels: Vec<u8> = data.iter().map(|d| d.1).collect();
            labels[0] = 0;
            labels[1] = 1;
            let scores: Vec<f64> = data.iter().map(|d| (d.0 * 4.0).round() / 4.0).collect();
            let a = auc(&scores, &labels).unwrap();
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            prop_assert!((a + auc(&neg, &labels).unwrap() - 1.0).abs() < 1e-12);
            let ex: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            prop_assert!((a - auc(&ex, &labels).unwrap()).abs() < 1e-12);
            let aff: Vec<f64> = scores.iter().map(|s| 3.0 * s + 7.0).collect();
            prop_assert!((a - auc(&aff, &labels).unwrap()).abs() < 1e-12);

            let op = operating_point(&roc_curve(&scores, &labels).unwrap());
            let op2 = operating_point(&roc_curve(&ex, &labels).unwrap());
            prop_assert_eq!((op.sensitivity, op.specificity), (op2.sensitivity, op2.specificity));
        }
    }
}
