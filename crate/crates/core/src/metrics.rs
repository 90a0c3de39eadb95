//! Binary classification metrics and dev-set threshold selection.
//!
//! A score `s` is predicted positive at threshold `t` when `s >= t`.

use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Scores paired with 0/1 labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::dim("scored set", &[scores.len()], &[labels.len()]));
        }
        if scores.is_empty() {
            return Err(Error::Input("scored set is empty".into()));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Input(format!("score {i} is not finite")));
        }
        if let Some(i) = labels.iter().position(|&l| l > 1) {
            return Err(Error::Input(format!("label {i} is not 0 or 1")));
        }
        Ok(ScoredSet { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    fn require_both(&self, metric: &str) -> Result<()> {
        if self.positives() == 0 || self.negatives() == 0 {
            return Err(Error::MetricUndefined(format!(
                "{metric} needs both classes, got {} positive and {} negative",
                self.positives(),
                self.negatives()
            )));
        }
        Ok(())
    }

    /// `(false positive rate, false negative rate)` at `threshold`.
    pub fn rates_at(&self, threshold: f64) -> (f64, f64) {
        let (mut fp, mut fneg) = (0usize, 0usize);
        for (&s, &l) in self.scores.iter().zip(&self.labels) {
            match (s >= threshold, l) {
                (true, 0) => fp += 1,
                (false, 1) => fneg += 1,
                _ => {}
            }
        }
        (
            fp as f64 / self.negatives().max(1) as f64,
            fneg as f64 / self.positives().max(1) as f64,
        )
    }

    fn distinct_sorted(&self) -> Vec<f64> {
        let mut s = self.scores.clone();
        s.sort_by(f64::total_cmp);
        s.dedup();
        s
    }
}

/// Area under the ROC curve from the Mann-Whitney rank statistic, tied
/// scores sharing their average rank.
pub fn auc(set: &ScoredSet) -> Result<f64> {
    set.require_both("AUC")?;
    let n = set.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && set.scores[order[j + 1]] == set.scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if set.labels[k] == 1 {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let (p, q) = (set.positives() as f64, set.negatives() as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Average precision `Σ_k (R_k − R_{k−1}) P_k` over the ranking by
/// descending score, ties kept in input order.
pub fn ap(set: &ScoredSet) -> Result<f64> {
    let p = set.positives();
    if p == 0 {
        return Err(Error::MetricUndefined("AP needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[b].total_cmp(&set.scores[a]));
    let mut tp = 0usize;
    let mut total = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if set.labels[i] == 1 {
            tp += 1;
            total += tp as f64 / (k + 1) as f64;
        }
    }
    // one division at the end keeps a perfect ranking at exactly 1
    Ok(total / p as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RateKind {
    /// False-positive rate with the false-negative rate pinned.
    FprAtFnr,
    /// False-negative rate with the false-positive rate pinned.
    FnrAtFpr,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint {
    /// The reported (complementary) rate.
    pub rate: f64,
    /// The pinned rate actually achieved, the largest achievable value not
    /// above the requested one.
    pub pinned: f64,
    pub threshold: f64,
}

/// Sweeps thresholds over the distinct scores (and `+∞`, which predicts
/// everything negative), keeps the operating points whose pinned rate is
/// the largest achievable value `<= pinned`, and reports the best
/// complementary rate among them.
pub fn rate_at_rate(set: &ScoredSet, which: RateKind, pinned: f64) -> Result<OperatingPoint> {
    set.require_both("rate at rate")?;
    if !(pinned > 0.0 && pinned < 1.0) {
        return Err(Error::Input(format!("pinned rate {pinned} is not in (0, 1)")));
    }
    let mut candidates = set.distinct_sorted();
    candidates.push(f64::INFINITY);
    let mut best: Option<OperatingPoint> = None;
    for t in candidates {
        let (fpr, fnr) = set.rates_at(t);
        let (pin, rate) = match which {
            RateKind::FprAtFnr => (fnr, fpr),
            RateKind::FnrAtFpr => (fpr, fnr),
        };
        if pin > pinned {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => pin > b.pinned || (pin == b.pinned && rate < b.rate),
        };
        if better {
            best = Some(OperatingPoint {
                rate,
                pinned: pin,
                threshold: t,
            });
        }
    }
    // the extreme thresholds always give a pinned rate of zero
    Ok(best.expect("an extreme threshold is always feasible"))
}

/// Harmonic mean of precision and recall at `threshold`; zero when both are.
pub fn f1_at(set: &ScoredSet, threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&s, &l) in set.scores.iter().zip(&set.labels) {
        match (s >= threshold, l) {
            (true, 1) => tp += 1,
            (true, _) => fp += 1,
            (false, 1) => fneg += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    // equal to 2PR / (P + R); one rounding, so equal F1 compare equal
    (2 * tp) as f64 / (2 * tp + fp + fneg) as f64
}

/// Candidate thresholds: one below every score, then the midpoints of
/// consecutive distinct scores, ascending.
pub fn threshold_candidates(set: &ScoredSet) -> Vec<f64> {
    let d = set.distinct_sorted();
    let mut out = Vec::with_capacity(d.len());
    out.push(d[0] - 1.0);
    out.extend(d.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    out
}

/// F1-maximizing threshold over [`threshold_candidates`]; ties go to the
/// lower threshold.
pub fn select_threshold(dev: &ScoredSet) -> Result<f64> {
    dev.require_both("threshold selection")?;
    let mut best = (f64::NAN, -1.0);
    for t in threshold_candidates(dev) {
        let f = f1_at(dev, t);
        if f.partial_cmp(&best.1) == Some(Ordering::Greater) {
            best = (t, f);
        }
    }
    Ok(best.0)
}

pub const PINNED_RATE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub auc: f64,
    pub ap: f64,
    pub f1: f64,
    pub threshold: f64,
    pub fpr_at_5fnr: f64,
    pub fnr_at_5fpr: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

pub fn report(set: &ScoredSet, threshold: f64) -> Result<Report> {
    Ok(Report {
        auc: auc(set)?,
        ap: ap(set)?,
        f1: f1_at(set, threshold),
        threshold,
        fpr_at_5fnr: rate_at_rate(set, RateKind::FprAtFnr, PINNED_RATE)?.rate,
        fnr_at_5fpr: rate_at_rate(set, RateKind::FnrAtFpr, PINNED_RATE)?.rate,
        n_pos: set.positives(),
        n_neg: set.negatives(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn set(scores: &[f64], labels: &[u8]) -> ScoredSet {
        ScoredSet::new(scores.to_vec(), labels.to_vec()).unwrap()
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&set(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])).unwrap(), 1.0);
        assert_eq!(auc(&set(&[0.5; 4], &[0, 1, 0, 1])).unwrap(), 0.5);
        assert!(matches!(
            auc(&set(&[0.1, 0.2], &[1, 1])),
            Err(Error::MetricUndefined(_))
        ));
    }

    #[test]
    fn ap_cases() {
        assert_eq!(ap(&set(&[0.9, 0.8, 0.1], &[1, 1, 0])).unwrap(), 1.0);
        let n = 7;
        let mut scores: Vec<f64> = (0..n).map(|i| 1.0 - i as f64 / 10.0).collect();
        let mut labels = vec![0u8; n];
        labels[n - 1] = 1;
        scores[n - 1] = 0.0;
        assert!((ap(&set(&scores, &labels)).unwrap() - 1.0 / n as f64).abs() < 1e-15);
        assert!(ap(&set(&[0.3], &[0])).is_err());
    }

    #[test]
    fn rate_cases() {
        let perfect = set(&[0.1, 0.2, 0.3, 0.7, 0.8, 0.9], &[0, 0, 0, 1, 1, 1]);
        assert_eq!(rate_at_rate(&perfect, RateKind::FprAtFnr, 0.05).unwrap().rate, 0.0);
        assert_eq!(rate_at_rate(&perfect, RateKind::FnrAtFpr, 0.05).unwrap().rate, 0.0);
        let anti = set(&[0.9, 0.8, 0.7, 0.3, 0.2, 0.1], &[0, 0, 0, 1, 1, 1]);
        assert_eq!(rate_at_rate(&anti, RateKind::FprAtFnr, 0.05).unwrap().rate, 1.0);
        assert_eq!(rate_at_rate(&anti, RateKind::FnrAtFpr, 0.05).unwrap().rate, 1.0);
        assert!(rate_at_rate(&anti, RateKind::FnrAtFpr, 1.0).is_err());
    }

    #[test]
    fn threshold_cases() {
        let sep = set(&[0.1, 0.3, 0.6, 0.9], &[0, 0, 1, 1]);
        let t = select_threshold(&sep).unwrap();
        assert!(t > 0.3 && t < 0.6);
        assert_eq!(f1_at(&sep, t), 1.0);

        let flat = set(&[0.4; 4], &[0, 1, 0, 1]);
        let t = select_threshold(&flat).unwrap();
        assert!(t < 0.4);
        // all predicted positive: precision 1/2, recall 1
        assert!((f1_at(&flat, t) - 2.0 / 3.0).abs() < 1e-15);
        assert!(select_threshold(&set(&[0.2, 0.3], &[0, 0])).is_err());
    }

    #[test]
    fn f1_cases() {
        let s = set(&[0.9, 0.8, 0.2, 0.1], &[1, 0, 1, 0]);
        assert_eq!(f1_at(&s, 0.5), 0.5);
        assert_eq!(f1_at(&s, 0.95), 0.0);
        assert_eq!(f1_at(&set(&[0.9, 0.1], &[1, 0]), 0.5), 1.0);
    }
}
