//! Randomized invariants.

mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use smds_core::evaluate::{evaluate, regime_accuracy, similarity_align, columnwise_cc, spike_pp_from_scores};
use smds_core::filtering::smsnf_filter;
use smds_core::learning::{e_step, m_step, EmConfig};
use smds_core::linalg::{min_eigenvalue, max_asymmetry, repair_covariance, COV_JITTER};
use smds_core::model::{deserialize_model, serialize_model, validate_model};
use smds_core::simulate::{rng_for, simulate_series};
use smds_core::smoothing::sms_run;

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig { cases: n, ..ProptestConfig::default() }
}

/// A two-regime toy model with randomized transitions and initial regime.
fn model_with(stay: f64, p1: f64) -> smds_core::SwitchingModel {
    let mut m = toy_model(2);
    m.phi = DMatrix::from_row_slice(2, 2, &[stay, 1.0 - stay, 1.0 - stay, stay]);
    m.pi0 = DVector::from_vec(vec![p1, 1.0 - p1]);
    m
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn accepted_models_have_stochastic_columns(a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0, jitter in -1e-9f64..1e-9) {
        let mut m = gaussian_model(2, 2, 3, 5);
        let cols = [[a, 1.0 - a], [b, 1.0 - b], [c, 1.0 - c]];
        m.phi = DMatrix::from_fn(3, 3, |j, i| match j {
            0 => cols[i][0] * 0.5,
            1 => cols[i][0] * 0.5,
            _ => cols[i][1],
        });
        m.phi[(2, 0)] += jitter;
        let accepted = validate_model(&m).is_empty();
        for i in 0..3 {
            if accepted {
                prop_assert!((m.phi.column(i).sum() - 1.0).abs() <= 1e-12);
            }
        }
        if jitter.abs() > 1e-11 {
            prop_assert!(!accepted);
        }
    }

    #[test]
    fn repaired_covariance_is_symmetric_and_floored(seed in any::<u64>(), d in 1usize..6, shift in -2.0f64..1.0) {
        let mut r = rng(seed);
        let raw = randn(d, d, &mut r) + DMatrix::identity(d, d) * shift;
        let out = repair_covariance(&raw, COV_JITTER).unwrap();
        prop_assert!(max_asymmetry(&out) == 0.0);
        prop_assert!(min_eigenvalue(&out) >= COV_JITTER - 1e-12);
    }

    #[test]
    fn serialization_roundtrips(seed in 0u64..1000, m in 1usize..4) {
        let model = gaussian_model(2, 3, m, seed);
        let back = deserialize_model(&serialize_model(&model).unwrap()).unwrap();
        prop_assert_eq!(back, model);
    }

    #[test]
    fn relabeling_keeps_accuracy(labels in prop::collection::vec(1usize..4, 1..60), guess in prop::collection::vec(1usize..4, 60), perm in Just([1usize, 2, 3]).prop_shuffle()) {
        let guess = &guess[..labels.len()];
        let relabeled: Vec<usize> = guess.iter().map(|&g| perm[g - 1]).collect();
        let a = regime_accuracy(&labels, guess, false).unwrap();
        let b = regime_accuracy(&labels, &relabeled, false).unwrap();
        prop_assert!((a - b).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn alignment_ignores_invertible_transforms(seed in any::<u64>()) {
        let mut r = rng(seed);
        let truth = randn(200, 3, &mut r);
        let est = &truth * randn(3, 3, &mut r) + randn(200, 3, &mut r) * 0.5;
        let g = randn(3, 3, &mut r) + DMatrix::identity(3, 3) * 3.0;
        let a = similarity_align(&est, &truth).unwrap();
        let b = similarity_align(&(&est * &g), &truth).unwrap();
        let ca = columnwise_cc(&a.aligned, &truth).unwrap();
        let cb = columnwise_cc(&b.aligned, &truth).unwrap();
        prop_assert!((ca.mean - cb.mean).abs() < 1e-10);
        for v in &ca.per_dim {
            prop_assert!((-1.0..=1.0).contains(v));
        }
    }

    #[test]
    fn pp_is_rank_invariant(seed in any::<u64>(), scale in 0.1f64..10.0, offset in -5.0f64..5.0) {
        let mut r = rng(seed);
        let (t, c) = (300, 3);
        let base = randn(t, c, &mut r);
        let spikes = DMatrix::from_fn(t, c, |k, n| u32::from(base[(k, n)] + randn(1, 1, &mut r)[(0, 0)] > 0.5));
        let warped = base.map(|v| (scale * v + offset).exp() + v.powi(3));
        let a = spike_pp_from_scores(&base, &spikes);
        let b = spike_pp_from_scores(&warped, &spikes);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert!((a.pp - b.pp).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&a.pp));
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "only one side failed"),
        }
    }
}

proptest! {
    #![proptest_config(cases(12))]

    #[test]
    fn regime_posteriors_are_distributions(seed in 0u64..10_000, stay in 0.5f64..0.999, p1 in 0.01f64..0.99) {
        let model = model_with(stay, p1);
        let s = simulate_series(&model, 120, &mut rng_for(seed, 1)).unwrap();
        let filt = smsnf_filter(&model, &s).unwrap();
        for st in &filt.steps {
            prop_assert!((st.regime_prob.sum() - 1.0).abs() < 1e-10);
            prop_assert!(st.regime_prob.iter().all(|p| (0.0..=1.0).contains(p)));
            prop_assert!(min_eigenvalue(&st.merged.cov) >= 0.0);
        }
        let sm = sms_run(&model, &filt).unwrap();
        for k in 0..sm.len() {
            prop_assert!((sm.w.row(k).sum() - 1.0).abs() < 1e-10);
        }
        for (k, pair) in sm.wpair.iter().enumerate() {
            prop_assert!((pair.sum() - 1.0).abs() < 1e-10);
            for j in 0..2 {
                prop_assert!((pair.row(j).sum() - sm.w[(k + 1, j)]).abs() < 1e-8);
            }
        }
        for c in &sm.cov {
            prop_assert!(max_asymmetry(c) <= 1e-10);
            prop_assert!(min_eigenvalue(c) >= -1e-10);
        }
    }

    #[test]
    fn m_step_always_yields_valid_models(seed in 0u64..10_000, stay in 0.5f64..0.999) {
        let model = model_with(stay, 0.5);
        let s = simulate_series(&model, 150, &mut rng_for(seed, 1)).unwrap();
        let cfg = EmConfig { regimes: 2, latent_dim: 2, ..Default::default() };
        let e = e_step(&model, &s).unwrap();
        let (next, _) = m_step(&e.stats, &s, &model, &cfg).unwrap();
        prop_assert!(validate_model(&next).is_empty());
    }

    #[test]
    fn true_model_normalizes_to_one(seed in 0u64..10_000) {
        let model = toy_model(2);
        let s = simulate_series(&model, 200, &mut rng_for(seed, 2)).unwrap();
        let rep = evaluate(&model, &s, Some(&model)).unwrap();
        for v in [rep.latent_cc_normalized, rep.field_pred_cc_normalized, rep.spike_pp_normalized].into_iter().flatten() {
            prop_assert!((v - 1.0).abs() < 1e-12);
        }
        prop_assert!(rep.latent_cc_normalized.is_some());
    }
}
