//! Scoring: class-balanced accuracy, aggregate gain over a reference method,
//! and the shuffled-order variance protocol.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error(
        "effective accuracy undefined: needs at least one positive and one \
         negative label (tp {tp}, fp {fp}, tn {tn}, fn {fn_})"
    )]
    ClassAbsent { tp: u64, fp: u64, tn: u64, fn_: u64 },
    #[error("score lists differ in length: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("score lists are empty")]
    Empty,
    #[error(
        "gain factor for task {index} is {factor} (must be positive): the \
         geometric mean is undefined below a -100 point difference"
    )]
    NonPositiveFactor { index: usize, factor: f64 },
}

/// Binary outcome tallies. "Positive" is the Yes class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn record(&mut self, actual: bool, predicted: bool) {
        match (actual, predicted) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fp += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// 100 x geometric mean of the true-positive and true-negative rates. A
/// degenerate predictor (all-Yes or all-No) scores 0; a test set missing a
/// label class makes the metric undefined and errors.
pub fn effective_accuracy(c: &ConfusionCounts) -> Result<f64, MetricsError> {
    let positives = c.tp + c.fn_;
    let negatives = c.tn + c.fp;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::ClassAbsent {
            tp: c.tp,
            fp: c.fp,
            tn: c.tn,
            fn_: c.fn_,
        });
    }
    let tpr = c.tp as f64 / positives as f64;
    let tnr = c.tn as f64 / negatives as f64;
    Ok(100.0 * (tpr * tnr).sqrt())
}

/// Geometric-mean aggregate of per-task score differences against a
/// reference method: (prod_i (100 + method_i - reference_i))^(1/n) - 100.
/// Zero when the lists agree; positive when the method wins on balance.
pub fn delta_vs_reference(method: &[f64], reference: &[f64]) -> Result<f64, MetricsError> {
    if method.len() != reference.len() {
        return Err(MetricsError::LengthMismatch {
            left: method.len(),
            right: reference.len(),
        });
    }
    if method.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut log_sum = 0.0;
    for (index, (&o, &r)) in method.iter().zip(reference).enumerate() {
        let factor = 100.0 + o - r;
        if !(factor > 0.0) {
            return Err(MetricsError::NonPositiveFactor { index, factor });
        }
        log_sum += factor.ln();
    }
    Ok((log_sum / method.len() as f64).exp() - 100.0)
}

/// Population (not sample) standard deviation.
pub fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderVarianceReport {
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum OrderVarianceError<E> {
    #[error("order variance needs at least 2 shuffle seeds, got {0}")]
    TooFewShuffles(usize),
    #[error("evaluation under shuffle seed {seed} failed: {source}")]
    Eval {
        seed: u64,
        #[source]
        source: E,
    },
}

/// Evaluate once per shuffle seed and summarize the spread. The closure must
/// re-evaluate the full test set with every item's retrieved exemplars
/// permuted under that seed (see `shuffle_indices`), returning an effective
/// accuracy.
pub fn order_variance<E, F>(
    seeds: &[u64],
    mut eval: F,
) -> Result<OrderVarianceReport, OrderVarianceError<E>>
where
    F: FnMut(u64) -> Result<f64, E>,
{
    if seeds.len() < 2 {
        return Err(OrderVarianceError::TooFewShuffles(seeds.len()));
    }
    let mut scores = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        scores.push(eval(seed).map_err(|source| OrderVarianceError::Eval { seed, source })?);
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let std = population_std(&scores);
    Ok(OrderVarianceReport { scores, mean, std })
}

/// Default shuffle seeds for the five-run protocol.
pub const DEFAULT_SHUFFLE_SEEDS: [u64; 5] = [11, 22, 33, 44, 55];

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic permutation of `0..len` keyed by shuffle seed and item id,
/// so each test item gets its own stable exemplar order per seed.
pub fn shuffle_indices(seed: u64, item_key: &str, len: usize) -> Vec<usize> {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    let mut rng =
        rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(item_key.as_bytes()));
    let mut order: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_classifier_scores_100() {
        let c = ConfusionCounts {
            tp: 40,
            tn: 60,
            ..Default::default()
        };
        assert!((effective_accuracy(&c).unwrap() - 100.0).abs() <= 1e-12);
    }

    #[test]
    fn always_yes_scores_zero() {
        let c = ConfusionCounts {
            tp: 50,
            fp: 50,
            ..Default::default()
        };
        assert_eq!(effective_accuracy(&c).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_rates_match_to_1e9() {
        // TPR = 0.9, TNR = 0.64: 100 * sqrt(0.576).
        let c = ConfusionCounts {
            tp: 90,
            fn_: 10,
            tn: 64,
            fp: 36,
        };
        let got = effective_accuracy(&c).unwrap();
        assert!((got - 75.89466384404111).abs() <= 1e-9, "{got}");
    }

    #[test]
    fn missing_class_is_an_error() {
        let c = ConfusionCounts {
            tp: 10,
            fn_: 2,
            ..Default::default()
        };
        assert!(matches!(
            effective_accuracy(&c),
            Err(MetricsError::ClassAbsent { .. })
        ));
    }

    #[test]
    fn swapping_classes_leaves_the_score_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let c = ConfusionCounts {
                tp: rng.gen_range(1..50),
                fp: rng.gen_range(0..50),
                tn: rng.gen_range(1..50),
                fn_: rng.gen_range(0..50),
            };
            let swapped = ConfusionCounts {
                tp: c.tn,
                fn_: c.fp,
                tn: c.tp,
                fp: c.fn_,
            };
            let a = effective_accuracy(&c).unwrap();
            let b = effective_accuracy(&swapped).unwrap();
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn recording_outcomes_fills_the_right_cells() {
        let mut c = ConfusionCounts::default();
        c.record(true, true);
        c.record(true, false);
        c.record(false, false);
        c.record(false, true);
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 1,
                fn_: 1,
                tn: 1,
                fp: 1
            }
        );
        assert_eq!(c.total(), 4);
    }

    #[test]
    fn identical_score_lists_give_zero_gain() {
        let s = vec![61.25, 80.0, 99.9];
        assert!(delta_vs_reference(&s, &s).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn two_task_example_matches_hand_value() {
        // sqrt(110 * 105) - 100, computed at 50-digit precision.
        let got = delta_vs_reference(&[80.0, 90.0], &[70.0, 85.0]).unwrap();
        assert!((got - 7.47092630102338520).abs() <= 1e-9, "{got}");
    }

    #[test]
    fn single_task_gain_is_the_plain_difference() {
        let got = delta_vs_reference(&[70.66], &[51.0]).unwrap();
        assert!((got - 19.66).abs() <= 1e-9, "{got}");
    }

    #[test]
    fn gain_is_invariant_to_task_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n = rng.gen_range(2..6);
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(10.0..95.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(10.0..95.0)).collect();
            let base = delta_vs_reference(&a, &b).unwrap();
            // One fixed permutation: reverse.
            let ar: Vec<f64> = a.iter().rev().copied().collect();
            let br: Vec<f64> = b.iter().rev().copied().collect();
            let rev = delta_vs_reference(&ar, &br).unwrap();
            assert!((base - rev).abs() <= 1e-9);
        }
    }

    #[test]
    fn ruinous_losses_are_a_domain_error() {
        let err = delta_vs_reference(&[0.0], &[100.0]).unwrap_err();
        assert!(matches!(err, MetricsError::NonPositiveFactor { index: 0, .. }));
        assert!(delta_vs_reference(&[50.0], &[50.0, 60.0]).is_err());
        assert!(delta_vs_reference(&[], &[]).is_err());
    }

    #[test]
    fn order_variance_needs_two_seeds() {
        let err = order_variance(&[1], |_| Ok::<f64, std::convert::Infallible>(50.0)).unwrap_err();
        assert!(matches!(err, OrderVarianceError::TooFewShuffles(1)));
    }

    #[test]
    fn constant_scores_have_zero_spread() {
        let report =
            order_variance(&[1, 2, 3, 4, 5], |_| Ok::<f64, std::convert::Infallible>(81.0))
                .unwrap();
        assert_eq!(report.std, 0.0);
        assert_eq!(report.mean, 81.0);
        assert_eq!(report.scores.len(), 5);
    }

    #[test]
    fn varying_scores_have_the_hand_computed_spread() {
        // Scores 10, 20: mean 15, population std 5.
        let mut flip = false;
        let report = order_variance(&[1, 2], move |_| {
            flip = !flip;
            Ok::<f64, std::convert::Infallible>(if flip { 10.0 } else { 20.0 })
        })
        .unwrap();
        assert!((report.std - 5.0).abs() <= 1e-12);
    }

    #[test]
    fn eval_failures_carry_the_seed() {
        let err = order_variance(&[7, 8], |seed| {
            if seed == 8 {
                Err("boom")
            } else {
                Ok(1.0)
            }
        })
        .unwrap_err();
        match err {
            OrderVarianceError::Eval { seed, source } => {
                assert_eq!(seed, 8);
                assert_eq!(source, "boom");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn item_shuffles_are_stable_and_item_specific() {
        let a = shuffle_indices(9, "item-1", 6);
        let b = shuffle_indices(9, "item-1", 6);
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4, 5]);
        // Different items and different seeds both move the order (with 6! =
        // 720 arrangements collisions are possible but not for these keys).
        assert_ne!(a, shuffle_indices(9, "item-2", 6));
        assert_ne!(a, shuffle_indices(10, "item-1", 6));
    }

    #[test]
    fn population_std_of_known_values() {
        assert!((population_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]) - 2.0).abs() <= 1e-12);
        assert_eq!(population_std(&[]), 0.0);
        assert_eq!(population_std(&[3.0]), 0.0);
    }
}
