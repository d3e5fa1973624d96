//! Central-difference checks of the full model and its submodules.

use hgv_core::data::{synth_generate, SynthSpec};
use hgv_core::fusion::{ForwardMode, HgvModel};
use hgv_core::harness::{run_gradcheck, TrainConfig};
use hgv_core::ndtensor::{grad_check, grad_check_params, DEFAULT_STEP};

const FULL_MODEL_TOL: f64 = 1e-4;
const SUBMODULE_TOL: f64 = 1e-6;

#[test]
fn full_hybrid_loss_matches_central_differences() {
    let summary = run_gradcheck(&TrainConfig::tiny(), 7).unwrap();
    assert!(summary.max_rel_error < FULL_MODEL_TOL, "{summary:?}");
    assert!(summary.checked > summary.skipped * 10, "{summary:?}");
}

#[test]
fn ablated_variants_also_check() {
    for (gge, beta) in [(true, false), (false, true)] {
        let cfg = TrainConfig { disable_gge: gge, disable_beta_attn: beta, ..TrainConfig::tiny() };
        let summary = run_gradcheck(&cfg, 3).unwrap();
        assert!(summary.max_rel_error < FULL_MODEL_TOL, "{summary:?}");
    }
}

#[test]
fn predictor_parameters_match_tightly() {
    let cfg = TrainConfig::tiny();
    let data = synth_generate(&SynthSpec::new(4, 3, 2, 8, 11)).unwrap().dataset;
    let HgvModel { net, mut store } = HgvModel::new(cfg.model_config().unwrap(), 11).unwrap();
    let ids: Vec<_> =
        ["predictor/w1", "predictor/b1", "predictor/w2", "predictor/b2"].iter().map(|n| store.id(n).unwrap()).collect();
    let records: Vec<_> = data.records().iter().collect();
    let report = grad_check_params(&mut store, &ids, DEFAULT_STEP, |tape| {
        Ok(net.batch_loss(tape, &records, |_| ForwardMode::Eval, 1.0)?.loss)
    })
    .unwrap();
    assert!(report.max_rel_error() < SUBMODULE_TOL, "{report:?}");
}

#[test]
fn gradcheck_is_reproducible() {
    let cfg = TrainConfig::tiny();
    let data = synth_generate(&SynthSpec::new(3, 3, 2, 8, 2)).unwrap().dataset;
    let HgvModel { net, mut store } = HgvModel::new(cfg.model_config().unwrap(), 2).unwrap();
    let records: Vec<_> = data.records().iter().collect();
    let run = |store: &mut hgv_core::ParamStore| {
        grad_check(store, DEFAULT_STEP, |tape| Ok(net.batch_loss(tape, &records, |_| ForwardMode::Eval, 1.0)?.loss))
            .unwrap()
            .max_rel_error()
    };
    let a = run(&mut store);
    let b = run(&mut store);
    assert_eq!(a.to_bits(), b.to_bits());
}
