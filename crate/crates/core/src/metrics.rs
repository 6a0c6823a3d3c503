//! Matching detected events against ground truth and the accuracy metric
//! TP / (TP + FP + FN).

use std::ops::AddAssign;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MatchReport {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tolerance_samples: usize,
}

impl MatchReport {
    pub fn detected(&self) -> usize {
        self.tp + self.fp
    }

    pub fn truth(&self) -> usize {
        self.tp + self.fn_
    }
}

impl AddAssign for MatchReport {
    fn add_assign(&mut self, rhs: Self) {
        self.tp += rhs.tp;
        self.fp += rhs.fp;
        self.fn_ += rhs.fn_;
    }
}

/// Greedy one-to-one matching in time order: each truth spike takes the
/// nearest still-unmatched detection within ±`tolerance_samples` (ties go to
/// the earlier detection). Both inputs must be sorted ascending.
pub fn match_events(detected: &[usize], truth: &[usize], tolerance_samples: usize) -> MatchReport {
    debug_assert!(detected.windows(2).all(|w| w[0] <= w[1]));
    debug_assert!(truth.windows(2).all(|w| w[0] <= w[1]));
    let mut used = vec![false; detected.len()];
    let mut lo = 0;
    let mut tp = 0;
    for &t in truth {
        while lo < detected.len() && detected[lo] + tolerance_samples < t {
            lo += 1;
        }
        let mut best: Option<(usize, usize)> = None;
        let mut j = lo;
        while j < detected.len() && detected[j] <= t + tolerance_samples {
            if !used[j] {
                let d = detected[j].abs_diff(t);
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((j, d));
                }
            }
            j += 1;
        }
        if let Some((j, _)) = best {
            used[j] = true;
            tp += 1;
        }
    }
    let report = MatchReport {
        tp,
        fp: detected.len() - tp,
        fn_: truth.len() - tp,
        tolerance_samples,
    };
    debug_assert_eq!(report.detected(), detected.len());
    debug_assert_eq!(report.truth(), truth.len());
    report
}

pub fn accuracy(report: &MatchReport) -> Result<f64> {
    let denom = report.tp + report.fp + report.fn_;
    if denom == 0 {
        return Err(Error::UndefinedMetric);
    }
    Ok(report.tp as f64 / denom as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn report(tp: usize, fp: usize, fn_: usize) -> MatchReport {
        MatchReport {
            tp,
            fp,
            fn_,
            tolerance_samples: 0,
        }
    }

    /// Maximum number of truth/detection pairs within tolerance over all
    /// one-to-one assignments (exhaustive).
    pub(crate) fn brute_force_max_matching(detected: &[usize], truth: &[usize], tol: usize) -> usize {
        fn go(i: usize, truth: &[usize], detected: &[usize], used: &mut Vec<bool>, tol: usize) -> usize {
            if i == truth.len() {
                return 0;
            }
            let mut best = go(i + 1, truth, detected, used, tol);
            for j in 0..detected.len() {
                if !used[j] && detected[j].abs_diff(truth[i]) <= tol {
                    used[j] = true;
                    best = best.max(1 + go(i + 1, truth, detected, used, tol));
                    used[j] = false;
                }
            }
            best
        }
        go(0, truth, detected, &mut vec![false; detected.len()], tol)
    }

    #[test]
    fn exact_match() {
        let t = [10, 50, 90];
        let r = match_events(&t, &t, 5);
        assert_eq!((r.tp, r.fp, r.fn_), (3, 0, 0));
    }

    #[test]
    fn lone_detection_is_fp() {
        let r = match_events(&[7], &[], 24);
        assert_eq!((r.tp, r.fp, r.fn_), (0, 1, 0));
    }

    #[test]
    fn mixed_example_agrees_with_brute_force() {
        let r = match_events(&[102, 350], &[100, 200], 24);
        assert_eq!((r.tp, r.fp, r.fn_), (1, 1, 1));
        assert_eq!(brute_force_max_matching(&[102, 350], &[100, 200], 24), 1);
    }

    #[test]
    fn nearest_detection_wins() {
        let r = match_events(&[95, 99, 104], &[100], 10);
        assert_eq!((r.tp, r.fp, r.fn_), (1, 2, 0));
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&report(95, 2, 3)).unwrap(), 0.95);
        assert_eq!(accuracy(&report(7, 0, 0)).unwrap(), 1.0);
        assert_eq!(accuracy(&report(0, 1, 1)).unwrap(), 0.0);
        assert!(matches!(accuracy(&report(0, 0, 0)), Err(Error::UndefinedMetric)));
    }

    proptest! {
        #[test]
        fn bookkeeping_and_greedy_bound(
            mut det in proptest::collection::vec(0usize..400, 0..=12),
            mut truth in proptest::collection::btree_set(0usize..400, 0..=12),
            tol in 0usize..30,
        ) {
            det.sort_unstable();
            let truth: Vec<usize> = std::mem::take(&mut truth).into_iter().collect();
            let r = match_events(&det, &truth, tol);
            prop_assert_eq!(r.tp + r.fp, det.len());
            prop_assert_eq!(r.tp + r.fn_, truth.len());
            prop_assert!(r.tp <= truth.len());
            prop_assert!(r.tp <= brute_force_max_matching(&det, &truth, tol));
        }

        #[test]
        fn greedy_is_optimal_for_well_separated_truth(
            gaps in proptest::collection::vec(0usize..200, 1..=12),
            offsets in proptest::collection::vec((-40i64..40, any::<bool>()), 1..=12),
            extra in proptest::collection::vec(0usize..3000, 0..4),
        ) {
            let tol = 12;
            let mut t = 100;
            let truth: Vec<usize> = gaps.iter().map(|g| { t += 2 * tol + 1 + g; t }).collect();
            let mut det: Vec<usize> = truth.iter().zip(offsets.iter().cycle())
                .filter(|(_, (_, keep))| *keep)
                .map(|(&x, (o, _))| (x as i64 + o) as usize)
                .chain(extra)
                .take(12)
                .collect();
            det.sort_unstable();
            let r = match_events(&det, &truth, tol);
            prop_assert_eq!(r.tp, brute_force_max_matching(&det, &truth, tol));
        }

        #[test]
        fn accuracy_monotone_in_tp(tp in 0usize..100, fp in 0usize..100, fn_ in 0usize..100) {
            prop_assume!(tp + fp + fn_ > 0);
            let a = accuracy(&report(tp, fp, fn_)).unwrap();
            let b = accuracy(&report(tp + 1, fp, fn_)).unwrap();
            prop_assert!(b >= a);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
