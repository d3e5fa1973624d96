//! Ranking metrics against brute-force oracles, exhaustively on small inputs.

use hgv_core::objective::{auprc, auroc, bootstrap, min_se_pplus, Metric, MetricReport};
use hgv_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ALPHABET: [f64; 4] = [0.1, 0.35, 0.6, 0.9];
const MAX_EXHAUSTIVE: usize = 8;
const RANDOM_TOL: f64 = 1e-12;

/// Fraction of (positive, negative) pairs ranked correctly, ties one half.
fn pair_count_auroc(s: &[f64], y: &[u8]) -> f64 {
    let mut half_wins = 0u64;
    let (mut p, mut n) = (0u64, 0u64);
    for i in 0..s.len() {
        if y[i] == 1 {
            p += 1;
        } else {
            n += 1;
        }
        for j in 0..s.len() {
            if y[i] == 1 && y[j] == 0 {
                half_wins += if s[i] > s[j] {
                    2
                } else if s[i] == s[j] {
                    1
                } else {
                    0
                };
            }
        }
    }
    (half_wins as f64 / 2.0) / (p * n) as f64
}

/// Walk every cut of the ranking (score descending, index ascending) and add
/// precision times the recall gained at that cut.
fn cut_enumeration_auprc(s: &[f64], y: &[u8]) -> f64 {
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
    let p = y.iter().filter(|&&v| v == 1).count();
    let tp_at = |k: usize| order[..k].iter().filter(|&&i| y[i] == 1).count();
    let mut ap = 0.0;
    for k in 1..=s.len() {
        let (tp, tp_prev) = (tp_at(k), tp_at(k - 1));
        if tp > tp_prev {
            ap += (tp as f64 / k as f64) * (tp as f64 / p as f64 - tp_prev as f64 / p as f64);
        }
    }
    ap
}

/// Best min(sensitivity, precision) over thresholds at each distinct score,
/// predicting positive when score >= threshold.
fn threshold_sweep_min_se_pplus(s: &[f64], y: &[u8]) -> f64 {
    let p = y.iter().filter(|&&v| v == 1).count();
    let mut best: f64 = 0.0;
    for &tau in s {
        let tp = (0..s.len()).filter(|&i| s[i] >= tau && y[i] == 1).count();
        let flagged = (0..s.len()).filter(|&i| s[i] >= tau).count();
        best = best.max((tp as f64 / p as f64).min(tp as f64 / flagged as f64));
    }
    best
}

#[test]
fn exhaustive_small_sets_match_oracles_exactly() {
    let mut cases = 0u64;
    let (mut s, mut y) = ([0.0; MAX_EXHAUSTIVE], [0u8; MAX_EXHAUSTIVE]);
    for n in 1..=MAX_EXHAUSTIVE {
        for score_code in 0..4usize.pow(n as u32) {
            let mut c = score_code;
            for v in s.iter_mut().take(n) {
                *v = ALPHABET[c % 4];
                c /= 4;
            }
            for label_code in 0..(1u32 << n) {
                for (i, v) in y.iter_mut().enumerate().take(n) {
                    *v = ((label_code >> i) & 1) as u8;
                }
                let (s, y) = (&s[..n], &y[..n]);
                let pos = label_code.count_ones() as usize;
                if pos > 0 {
                    assert_eq!(auprc(s, y).unwrap().to_bits(), cut_enumeration_auprc(s, y).to_bits(), "{s:?} {y:?}");
                }
                if pos > 0 && pos < n {
                    assert_eq!(auroc(s, y).unwrap().to_bits(), pair_count_auroc(s, y).to_bits(), "{s:?} {y:?}");
                    assert_eq!(
                        min_se_pplus(s, y).unwrap().to_bits(),
                        threshold_sweep_min_se_pplus(s, y).to_bits(),
                        "{s:?} {y:?}"
                    );
                    cases += 1;
                }
            }
        }
    }
    assert!(cases > 10_000_000);
}

#[test]
fn random_size_fifty_sets_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for _ in 0..1000 {
        let s: Vec<f64> = (0..50).map(|_| (rng.gen_range(0.0..1.0f64) * 20.0).round() / 20.0).collect();
        let mut y: Vec<u8> = (0..50).map(|_| rng.gen_bool(0.3) as u8).collect();
        y[0] = 1;
        y[1] = 0;
        assert!((auroc(&s, &y).unwrap() - pair_count_auroc(&s, &y)).abs() < RANDOM_TOL);
        assert!((auprc(&s, &y).unwrap() - cut_enumeration_auprc(&s, &y)).abs() < RANDOM_TOL);
        assert!((min_se_pplus(&s, &y).unwrap() - threshold_sweep_min_se_pplus(&s, &y)).abs() < RANDOM_TOL);
    }
}

#[test]
fn worked_examples() {
    let s = [0.9, 0.8, 0.3, 0.1];
    assert_eq!(auroc(&s, &[1, 1, 0, 0]).unwrap(), 1.0);
    assert_eq!(auroc(&s, &[1, 0, 1, 0]).unwrap(), 0.75);
    assert_eq!(auroc(&[0.5; 4], &[1, 0, 1, 0]).unwrap(), 0.5);
    assert_eq!(auprc(&s, &[1, 1, 0, 0]).unwrap(), 1.0);
    assert_eq!(auprc(&s, &[0, 1, 0, 1]).unwrap(), 0.5);
    assert_eq!(auprc(&s, &[1, 1, 1, 1]).unwrap(), 1.0);
    assert_eq!(min_se_pplus(&s, &[1, 1, 0, 0]).unwrap(), 1.0);
    assert!((min_se_pplus(&s, &[1, 0, 1, 0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn degenerate_inputs_are_protocol_errors() {
    assert!(matches!(auroc(&[0.1, 0.2], &[1, 1]), Err(Error::Protocol(_))));
    assert!(matches!(auprc(&[0.1, 0.2], &[0, 0]), Err(Error::Protocol(_))));
    assert!(matches!(min_se_pplus(&[0.1, 0.2], &[0, 0]), Err(Error::Protocol(_))));
}

#[test]
fn bootstrap_is_reproducible_and_single_resample_has_no_spread() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s: Vec<f64> = (0..200).map(|_| rng.gen()).collect();
    let y: Vec<u8> = (0..200).map(|i| (i % 3 == 0) as u8).collect();
    let a = MetricReport::compute(&s, &y, 1000, 17).unwrap();
    let b = MetricReport::compute(&s, &y, 1000, 17).unwrap();
    assert_eq!(a, b);
    assert!(a.auroc_std > 0.0);
    let one = bootstrap(Metric::Auroc, &s, &y, 1, 3).unwrap();
    assert_eq!(one.std, 0.0);
}

#[test]
fn perfect_separation_is_stable_under_resampling() {
    let s: Vec<f64> = (0..60).map(|i| i as f64).collect();
    let y: Vec<u8> = (0..60).map(|i| (i >= 30) as u8).collect();
    let st = bootstrap(Metric::Auroc, &s, &y, 200, 1).unwrap();
    assert_eq!(st.mean, 1.0);
    assert_eq!(st.std, 0.0);
}

#[test]
fn single_class_resamples_are_redrawn() {
    // One positive among three: many resamples miss it.
    let st = bootstrap(Metric::Auroc, &[0.9, 0.1, 0.2], &[1, 0, 0], 100, 0).unwrap();
    assert!(st.redraws > 0);
    assert_eq!(st.mean, 1.0);
}

fn labelled(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2..max).prop_flat_map(|n| {
        (prop::collection::vec(-5.0f64..5.0, n), prop::collection::vec(0u8..2, n)).prop_map(|(s, mut y)| {
            y[0] = 1;
            y[1] = 0;
            (s, y)
        })
    })
}

proptest! {
    #[test]
    fn metrics_invariant_under_increasing_transforms((s, y) in labelled(40)) {
        let t: Vec<f64> = s.iter().map(|v| (0.7 * v).exp() + 3.0).collect();
        prop_assert_eq!(auroc(&s, &y).unwrap(), auroc(&t, &y).unwrap());
        prop_assert_eq!(auprc(&s, &y).unwrap(), auprc(&t, &y).unwrap());
        prop_assert_eq!(min_se_pplus(&s, &y).unwrap(), min_se_pplus(&t, &y).unwrap());
    }

    #[test]
    fn auroc_of_negated_scores_complements((s, y) in labelled(40)) {
        let mut sorted = s.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted.windows(2).all(|w| w[0] < w[1]));
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((auroc(&s, &y).unwrap() + auroc(&neg, &y).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_lie_in_unit_interval((s, y) in labelled(40)) {
        for m in [Metric::Auroc, Metric::Auprc, Metric::MinSePplus] {
            let v = m.compute(&s, &y).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
