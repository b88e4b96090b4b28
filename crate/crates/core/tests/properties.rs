use proptest::prelude::*;
use rand::seq::index::sample;
use rand::Rng;

use redact_core::closedform::{redact_labels, redact_onehot, verify_redaction, LabelRedactionPlan};
use redact_core::experiment::{preset, ExperimentConfig, PRESETS};
use redact_core::jsonfmt::{fmt_f64, to_string_pretty};
use redact_core::metrics::recover_original_score;
use redact_core::redistill::{lambda_at, layer_schedules, RedactionSpec, Schedule};
use redact_core::rng::{normal_tensor, rng};
use redact_core::tensor::{forward, Primitive};
use redact_core::toy::{mmd2, SyntheticTask};
use redact_core::{Conditional, Tensor};

fn plan_from(r: &mut impl Rng, k: usize) -> LabelRedactionPlan {
    let j = r.random_range(1..k);
    let redacted = sample(r, k, j).into_vec();
    let kept: Vec<usize> = (0..k).filter(|i| !redacted.contains(i)).collect();
    let pairs: Vec<_> = redacted
        .iter()
        .map(|&c| (c, kept[r.random_range(0..kept.len())]))
        .collect();
    LabelRedactionPlan::new(k, &pairs).unwrap()
}

fn mm(a: &Tensor, b: &Tensor) -> Tensor {
    forward(Primitive::MatMul, &[a, b]).unwrap()
}

fn tr(a: &Tensor) -> Tensor {
    forward(Primitive::Transpose, &[a]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn closed_form_certificate_is_tight(seed in any::<u64>(), k in 2usize..12, rows in 1usize..24, extra in 0usize..4) {
        let mut r = rng(seed);
        let m = normal_tensor(&mut r, &[rows, k + extra], 1.0);
        let v = normal_tensor(&mut r, &[k + extra, k], 1.0);
        let plan = plan_from(&mut r, k);
        let m2 = redact_labels(&m, &v, &plan).unwrap();
        let cert = verify_redaction(&m, &m2, &v, &plan).unwrap();
        prop_assert!(cert.max_error() <= 1e-9, "{cert:?}");
    }

    #[test]
    fn onehot_matches_identity_embedding(seed in any::<u64>(), k in 2usize..12, rows in 1usize..24) {
        let mut r = rng(seed);
        let m = normal_tensor(&mut r, &[rows, k], 1.0);
        let plan = plan_from(&mut r, k);
        let a = redact_onehot(&m, &plan).unwrap();
        let b = redact_labels(&m, &Tensor::identity(k), &plan).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn weight_schedules_sum_to_one(n in 1usize..40, cycle in 1usize..6, frac in 0.0f64..0.99, bfrac in 0.0f64..0.99) {
        // Keeps every weight and coefficient positive under both offset kinds.
        let spread = ((n as f64 - 1.0) / 2.0).max((cycle as f64 + 1.0) / 6.0);
        let alpha = frac / (n as f64 * spread);
        let beta = bfrac / spread;
        for s in Schedule::ALL {
            let (w, l) = layer_schedules(n, cycle, s, alpha, beta, 1.0).unwrap();
            prop_assert_eq!(w.len(), n);
            prop_assert_eq!(l.len(), n);
            if !matches!(s, Schedule::WDilation) {
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn lambda_is_monotone_and_bounded(total in 1usize..5000, lo in 0.0f64..2.0, span in 0.0f64..4.0) {
        let hi = lo + span;
        let mut prev = lo;
        for step in (0..=total).step_by((total / 50).max(1)) {
            let l = lambda_at(step, total, lo, hi).unwrap();
            prop_assert!(l >= prev && l >= lo && l <= hi);
            prev = l;
        }
        prop_assert_eq!(lambda_at(0, total, lo, hi).unwrap(), lo);
        prop_assert_eq!(lambda_at(total, total, lo, hi).unwrap(), hi);
    }

    #[test]
    fn score_recovery_inverts_the_distilled_score(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..32),
        eta in 0.05f64..10.0,
    ) {
        let (u, c): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let d: Vec<f64> = u.iter().zip(&c).map(|(u, c)| u - eta * (c - u)).collect();
        let back = recover_original_score(&u, &d, eta).unwrap();
        for (a, b) in back.iter().zip(&c) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn json_floats_round_trip_bit_exact(x in any::<f64>().prop_filter("finite", |x| x.is_finite())) {
        let back: f64 = fmt_f64(x).parse().unwrap();
        prop_assert_eq!(back.to_bits(), x.to_bits());
        let text = to_string_pretty(&vec![x]).unwrap();
        let parsed: Vec<f64> = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(parsed[0].to_bits(), x.to_bits());
    }

    #[test]
    fn config_round_trips_through_toml(which in 0usize..PRESETS.len(), seed in 0u64..(1 << 53), lr in 1e-6f64..1.0) {
        let mut cfg = preset(PRESETS[which]).unwrap();
        cfg.seed = seed;
        cfg.train.lr = lr;
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn spec_partitions_the_conditionals(seed in any::<u64>(), k in 2usize..16) {
        let mut r = rng(seed);
        let plan = plan_from(&mut r, k);
        let spec = RedactionSpec::from_plan(&plan);
        let task = SyntheticTask::kgon(k).unwrap();
        let all = task.conditionals();
        let (valid, redacted) = spec.partition(&all);
        prop_assert_eq!(valid.len() + redacted.len(), all.len());
        prop_assert_eq!(redacted.len(), plan.redacted().len());
        for c in &valid {
            prop_assert!(!spec.contains(c));
        }
        for c in &redacted {
            let hat = spec.reference(c).unwrap();
            prop_assert!(valid.contains(&hat));
            prop_assert_eq!(hat, Conditional::label(plan.reference(c.tokens()[0]).unwrap()));
        }
    }

    #[test]
    fn mmd_is_nonnegative_and_symmetric(seed in any::<u64>(), n in 1usize..12, m in 1usize..12, d in 1usize..4, h in 0.1f64..5.0) {
        let mut r = rng(seed);
        let x = normal_tensor(&mut r, &[n, d], 1.0);
        let y = normal_tensor(&mut r, &[m, d], 1.0);
        let a = mmd2(&x, &y, h).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert_eq!(a, mmd2(&y, &x, h).unwrap());
        prop_assert!(mmd2(&x, &x, h).unwrap() <= 1e-12);
    }

    #[test]
    fn matmul_identities(seed in any::<u64>(), a in 1usize..8, b in 1usize..8, c in 1usize..8) {
        let mut r = rng(seed);
        let x = normal_tensor(&mut r, &[a, b], 1.0);
        let y = normal_tensor(&mut r, &[b, c], 1.0);
        prop_assert_eq!(tr(&tr(&x)), x.clone());
        prop_assert_eq!(mm(&x, &Tensor::identity(b)), x.clone());
        prop_assert!(tr(&mm(&x, &y)).max_abs_diff(&mm(&tr(&y), &tr(&x))) <= 1e-12);
    }
}
