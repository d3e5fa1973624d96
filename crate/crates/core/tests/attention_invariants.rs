//! Harmonic weights, attention distributions and aggregation invariants.

use hgv_core::battn::{harmonic_weight, harmonic_weights, significance, time_decay};
use hgv_core::data::{synth_generate, InstanceRecord, SynthSpec};
use hgv_core::fusion::{global_view_aggregate, ForwardMode, HgvModel, ModelConfig};
use hgv_core::ndtensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SUM_TOL: f64 = 1e-9;
const LARGE_BETA: f64 = 1e6;
const LARGE_BETA_TOL: f64 = 1e-4;

fn random_series(rng: &mut ChaCha8Rng, t: usize) -> Vec<f64> {
    (0..t).map(|_| rng.gen_range(-4.0..4.0)).collect()
}

#[test]
fn zero_beta_gives_exact_time_decay() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in [1usize, 2, 7, 12, 16, 48] {
        let w = harmonic_weights(&random_series(&mut rng, t), 0.0);
        for (i, v) in w.iter().enumerate() {
            assert_eq!(*v, (i + 1) as f64 / t as f64, "t={t} step={}", i + 1);
        }
    }
}

#[test]
fn huge_beta_approaches_significance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for t in [4usize, 12, 16] {
        let series = random_series(&mut rng, t);
        let o = significance(&series);
        for (w, o) in harmonic_weights(&series, LARGE_BETA).iter().zip(&o) {
            assert!((w - o).abs() < LARGE_BETA_TOL, "{w} vs {o}");
        }
    }
}

#[test]
fn harmonic_mean_sandwich_on_random_triples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10_000 {
        let d: f64 = rng.gen_range(1e-3..=1.0);
        let o: f64 = rng.gen_range(1e-3..=1.0);
        let beta: f64 = 10f64.powf(rng.gen_range(-6.0..6.0));
        let w = harmonic_weight(d, o, beta);
        let (lo, hi) = (d.min(o), d.max(o));
        // One ulp of slack for the rounded division.
        assert!(w >= lo * (1.0 - 1e-15) && w <= hi * (1.0 + 1e-15), "d={d} o={o} beta={beta} w={w}");
    }
}

#[test]
fn decay_and_significance_ranges() {
    assert_eq!(time_decay(16, 16), 1.0);
    assert_eq!(time_decay(1, 4), 0.25);
    let o = significance(&[-5.0, 0.0, 5.0]);
    assert_eq!(o[2], 1.0);
    assert!(o.iter().all(|&v| v > 0.0 && v <= 1.0));
}

fn tiny_record(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> InstanceRecord {
    InstanceRecord {
        id: "r".into(),
        static_features: (0..cfg.n_b).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        dynamic: (0..cfg.n_d).map(|_| random_series(rng, cfg.t)).collect(),
        label: 1,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sandwich_holds_everywhere(d in 1e-6f64..1.0, o in 1e-6f64..1.0, log_beta in -8f64..8.0) {
        let w = harmonic_weight(d, o, 10f64.powf(log_beta));
        prop_assert!(w >= d.min(o) * (1.0 - 1e-15));
        prop_assert!(w <= d.max(o) * (1.0 + 1e-15));
    }

    #[test]
    fn alpha_rows_and_mu_are_distributions(seed in any::<u64>(), harmonic in any::<bool>(), use_gge in any::<bool>()) {
        let cfg = ModelConfig { harmonic_attention: harmonic, use_gge, ..ModelConfig::tiny() };
        let model = HgvModel::new(cfg.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trace = model.trace(&tiny_record(&mut rng, &cfg)).unwrap();
        prop_assert_eq!(trace.alpha.len(), cfg.n_d);
        for row in &trace.alpha {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < SUM_TOL);
            prop_assert!(row.iter().all(|&a| a >= 0.0));
        }
        prop_assert_eq!(trace.mu.len(), cfg.n_d + 1);
        prop_assert!((trace.mu.iter().sum::<f64>() - 1.0).abs() < SUM_TOL);
        prop_assert!(trace.y_hat > 0.0 && trace.y_hat < 1.0);
        prop_assert_eq!(trace.beta.len(), if harmonic { cfg.n_d } else { 0 });
    }

    #[test]
    fn aggregate_argmax_survives_logit_shift(seed in any::<u64>(), shift in -3.0f64..3.0) {
        // Adding `c` to every entry of the last column adds c·Σ H_m to each
        // logit; choosing columns whose sums agree makes this a pure shift.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let mut tape = Tape::detached();
        let h = tape.constant(Tensor::from_rows(&rows).unwrap());
        let (_, mu) = global_view_aggregate(&mut tape, h).unwrap();
        let logits: Vec<f64> = (0..4).map(|m| (0..3).map(|r| rows[r][m] * rows[r][3]).sum()).collect();
        let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        let softmax = |v: &[f64]| {
            let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = v.iter().map(|x| (x - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let argmax = |v: &[f64]| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let mu = tape.value(mu).data().to_vec();
        prop_assert_eq!(argmax(&mu), argmax(&softmax(&shifted)));
        for (a, b) in mu.iter().zip(softmax(&logits)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn h_rep_lies_in_column_span(seed in any::<u64>()) {
        // H_rep is a convex combination of H's columns.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let mut tape = Tape::detached();
        let h = tape.constant(Tensor::from_rows(&rows).unwrap());
        let (rep, mu) = global_view_aggregate(&mut tape, h).unwrap();
        let mu = tape.value(mu).data().to_vec();
        for (r, row) in rows.iter().enumerate() {
            let expect: f64 = row.iter().zip(&mu).map(|(x, m)| x * m).sum();
            prop_assert!((tape.value(rep).data()[r] - expect).abs() < 1e-12);
            let (lo, hi) = row.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
            prop_assert!(tape.value(rep).data()[r] >= lo - 1e-12 && tape.value(rep).data()[r] <= hi + 1e-12);
        }
    }
}

/// Reorder channel `n`'s parameters into slot `perm[n]`.
fn permute_channel_params(model: &HgvModel, perm: &[usize]) -> HgvModel {
    let mut out = model.clone();
    for (from, &to) in perm.iter().enumerate() {
        for prefix in ["seqenc", "battn"] {
            for (_, p) in model.store.iter() {
                let src = format!("{prefix}/ch{from}/");
                if let Some(rest) = p.name.strip_prefix(&src) {
                    let id = out.store.id(&format!("{prefix}/ch{to}/{rest}")).unwrap();
                    out.store.set_value(id, p.value.clone()).unwrap();
                }
            }
        }
    }
    out
}

#[test]
fn channel_permutation_contract() {
    let cfg = ModelConfig::tiny();
    let model = HgvModel::new(cfg.clone(), 4).unwrap();
    let rec = synth_generate(&SynthSpec::new(1, 3, 2, 8, 4)).unwrap().dataset.records()[0].clone();
    let perm = [2usize, 0, 1];
    let mut permuted = rec.clone();
    for (from, &to) in perm.iter().enumerate() {
        permuted.dynamic[to] = rec.dynamic[from].clone();
    }

    let columns = |m: &HgvModel, r: &InstanceRecord| {
        let mut tape = Tape::new(&m.store);
        let f = m.net.forward(&mut tape, r, ForwardMode::Eval).unwrap();
        (tape.value(f.stack).clone(), tape.value(f.y_hat).item())
    };
    let (stack, y) = columns(&model, &rec);
    let moved = permute_channel_params(&model, &perm);
    let (stack_p, y_p) = columns(&moved, &permuted);
    let rows = stack.to_rows();
    let rows_p = stack_p.to_rows();
    for r in 0..rows.len() {
        for (from, &to) in perm.iter().enumerate() {
            assert!((rows[r][from] - rows_p[r][to]).abs() < 1e-12);
        }
        assert!((rows[r][3] - rows_p[r][3]).abs() < 1e-12, "instance column must not move");
    }
    // Self-attention and the global-view pooling are permutation equivariant.
    assert!((y - y_p).abs() < 1e-12);

    // Without moving the parameters the prediction generally changes.
    let (_, y_unmoved) = columns(&model, &permuted);
    assert!((y - y_unmoved).abs() > 1e-9);
}
