use proptest::prelude::*;
use qbert_core::metrics::{
    ap, auc, f1_at, rate_at_rate, report, select_threshold, threshold_candidates, RateKind, ScoredSet,
};
use qbert_core::model::Pooling;

/// Scores on a coarse grid so ties are common.
fn scored(max: usize) -> impl Strategy<Value = ScoredSet> {
    prop::collection::vec((0u8..20, 0u8..2), 2..=max)
        .prop_filter("both classes", |v| v.iter().any(|x| x.1 == 1) && v.iter().any(|x| x.1 == 0))
        .prop_map(|v| {
            let (s, l): (Vec<f64>, Vec<u8>) = v.into_iter().map(|(s, l)| (s as f64 / 19.0, l)).unzip();
            ScoredSet::new(s, l).unwrap()
        })
}

fn pairwise_auc(s: &ScoredSet) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in s.scores().iter().enumerate() {
        for (j, &sj) in s.scores().iter().enumerate() {
            if s.labels()[i] == 1 && s.labels()[j] == 0 {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

/// Walks the ranking explicitly, recording recall and precision after
/// every item and summing the recall increments times precision.
fn step_sum_ap(s: &ScoredSet) -> f64 {
    let mut order: Vec<usize> = (0..s.len()).collect();
    // stable insertion sort by descending score
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 && s.scores()[order[j - 1]] < s.scores()[order[j]] {
            order.swap(j - 1, j);
            j -= 1;
        }
    }
    let p = s.positives() as f64;
    let (mut prev_recall, mut tp, mut total) = (0.0, 0.0, 0.0);
    for (k, &i) in order.iter().enumerate() {
        if s.labels()[i] == 1 {
            tp += 1.0;
        }
        let recall = tp / p;
        let precision = tp / (k + 1) as f64;
        total += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    total
}

/// Every threshold that changes any prediction, plus both extremes.
fn all_thresholds(s: &ScoredSet) -> Vec<f64> {
    let mut t: Vec<f64> = s.scores().to_vec();
    t.push(f64::INFINITY);
    t.push(f64::NEG_INFINITY);
    t
}

fn enumerate_rate(s: &ScoredSet, which: RateKind, pinned: f64) -> f64 {
    let pts: Vec<(f64, f64)> = all_thresholds(s)
        .into_iter()
        .map(|t| {
            let (fpr, fnr) = s.rates_at(t);
            match which {
                RateKind::FprAtFnr => (fnr, fpr),
                RateKind::FnrAtFpr => (fpr, fnr),
            }
        })
        .filter(|&(pin, _)| pin <= pinned)
        .collect();
    let top = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    pts.iter().filter(|p| p.0 == top).map(|p| p.1).fold(f64::INFINITY, f64::min)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn auc_matches_pairwise(s in scored(200)) {
        prop_assert!((auc(&s).unwrap() - pairwise_auc(&s)).abs() < 1e-12);
    }

    #[test]
    fn ap_matches_step_sum(s in scored(200)) {
        prop_assert!((ap(&s).unwrap() - step_sum_ap(&s)).abs() < 1e-12);
    }

    #[test]
    fn rates_match_enumeration(s in scored(200), pinned in 0.01f64..0.99) {
        for which in [RateKind::FprAtFnr, RateKind::FnrAtFpr] {
            prop_assert_eq!(rate_at_rate(&s, which, pinned).unwrap().rate, enumerate_rate(&s, which, pinned));
        }
    }

    #[test]
    fn threshold_is_f1_optimal(s in scored(200)) {
        let t = select_threshold(&s).unwrap();
        let best = threshold_candidates(&s).into_iter().map(|c| f1_at(&s, c)).fold(0.0, f64::max);
        prop_assert_eq!(f1_at(&s, t), best);
        // and no lower candidate reaches the same F1
        for c in threshold_candidates(&s) {
            if c < t {
                prop_assert!(f1_at(&s, c) < best);
            }
        }
    }

    #[test]
    fn auc_and_ap_ignore_monotone_transforms(s in scored(100)) {
        let t = ScoredSet::new(s.scores().iter().map(|x| (3.0 * x).exp() - 7.0).collect(), s.labels().to_vec()).unwrap();
        prop_assert_eq!(auc(&s).unwrap(), auc(&t).unwrap());
        prop_assert_eq!(ap(&s).unwrap(), ap(&t).unwrap());
    }

    #[test]
    fn lower_allowance_never_lowers_the_rate(s in scored(100), a in 0.01f64..0.99, b in 0.01f64..0.99) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let r_lo = rate_at_rate(&s, RateKind::FprAtFnr, lo).unwrap().rate;
        let r_hi = rate_at_rate(&s, RateKind::FprAtFnr, hi).unwrap().rate;
        prop_assert!(r_lo >= r_hi);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn pooling_is_bounded(p in prop::collection::vec(0.0f64..1.0, 1..8)) {
        let (lo, mid, hi) = (Pooling::Min.apply(&p), Pooling::Mean.apply(&p), Pooling::Max.apply(&p));
        prop_assert!(lo <= mid + 1e-15 && mid <= hi + 1e-15);
    }
}

#[test]
fn handcrafted_rate_set() {
    // 10 negatives and 10 positives; one positive scores low, two negatives high
    let mut scores = vec![0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.85, 0.9];
    scores.extend([0.12, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.88, 0.95, 0.99]);
    let labels: Vec<u8> = (0..20).map(|i| u8::from(i >= 10)).collect();
    let s = ScoredSet::new(scores, labels).unwrap();
    for pinned in [0.05, 0.1, 0.2, 0.5] {
        for which in [RateKind::FprAtFnr, RateKind::FnrAtFpr] {
            assert_eq!(rate_at_rate(&s, which, pinned).unwrap().rate, enumerate_rate(&s, which, pinned));
        }
    }
    // FNR may not exceed 5%, so no positive may be lost: threshold 0.12,
    // where 8 of the 10 negatives still score above it
    let op = rate_at_rate(&s, RateKind::FprAtFnr, 0.05).unwrap();
    assert_eq!((op.pinned, op.threshold), (0.0, 0.12));
    assert!((op.rate - 0.8).abs() < 1e-15);
}

#[test]
fn perfect_report() {
    let s = ScoredSet::new(vec![0.0, 0.0, 1.0, 1.0], vec![0, 0, 1, 1]).unwrap();
    let t = select_threshold(&s).unwrap();
    let r = report(&s, t).unwrap();
    assert_eq!((r.auc, r.ap, r.f1, r.n_pos, r.n_neg), (1.0, 1.0, 1.0, 2, 2));
    assert_eq!((r.fpr_at_5fnr, r.fnr_at_5fpr), (0.0, 0.0));
}
