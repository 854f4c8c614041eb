use std::sync::Arc;

use proptest::prelude::*;

use vibropsi_core::analysis::{compare_to_reference, extract_thresholds, synthetic_reference};
use vibropsi_core::bape::{argmin_with_ties, Bape, CandidateSet, Outcome, Posterior};
use vibropsi_core::psymodel::{build_grid, export_grid, CurveSamples, GridConfig, Threshold, WeibullParams};
use vibropsi_core::stats::{binomial_test, bonferroni, t_test_one_sample};

fn small_engine() -> Bape {
    let grid = build_grid(&GridConfig { a_count: 18, b_count: 8, gamma_count: 12, ..GridConfig::default() }).unwrap();
    Bape::new(Arc::new(grid), CandidateSet::default())
}

fn params() -> impl Strategy<Value = WeibullParams> {
    (2.5..45.0f64, 0.3..10.0f64, 0.01..0.9f64, 0.0..0.05f64)
        .prop_map(|(a, b, g, d)| WeibullParams::new(a, b, g, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn invert_round_trips(p in params(), t in 0.01..0.99f64) {
        let level = p.gamma() + t * (p.ceiling() - p.gamma());
        match p.invert(level, f64::INFINITY).unwrap() {
            Threshold::Reached(x) => prop_assert!((p.eval(x) - level).abs() < 1e-9, "x={x}"),
            Threshold::NotReached => prop_assert!(false, "level below the ceiling must be reached"),
        }
    }

    #[test]
    fn monotone_below_ceiling(p in params(), x in 0.0..60.0f64, dx in 0.0..10.0f64) {
        prop_assert!(p.eval(x + dx) >= p.eval(x) - 1e-15);
    }

    #[test]
    fn updates_keep_normalization(seq in prop::collection::vec((0usize..18, any::<bool>()), 1..60)) {
        let engine = small_engine();
        let mut post = engine.uniform_posterior();
        for (c, correct) in seq {
            let x = engine.candidates().separations()[c];
            post = engine.update(&post, x, Outcome::from(correct)).unwrap();
            let total: f64 = post.weights().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(post.weights().iter().all(|w| *w >= 0.0));
        }
    }

    #[test]
    fn updates_commute(seq in prop::collection::vec((2.5..45.0f64, any::<bool>()), 2..12)) {
        let engine = small_engine();
        let forward = seq.iter().try_fold(engine.uniform_posterior(), |p, (x, c)| p.update(*x, Outcome::from(*c))).unwrap();
        let backward = seq.iter().rev().try_fold(engine.uniform_posterior(), |p, (x, c)| p.update(*x, Outcome::from(*c))).unwrap();
        for (a, b) in forward.weights().iter().zip(backward.weights()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lookahead_never_exceeds_current_entropy(seq in prop::collection::vec((0usize..18, any::<bool>()), 0..20)) {
        let engine = small_engine();
        let mut post = engine.uniform_posterior();
        for (c, correct) in seq {
            post = engine.update(&post, engine.candidates().separations()[c], Outcome::from(correct)).unwrap();
        }
        let sel = engine.select_next(&post);
        prop_assert!(sel.expected_entropies.iter().all(|e| *e <= sel.entropy + 1e-12));
        prop_assert_eq!(sel.index, argmin_with_ties(&sel.expected_entropies));
    }

    #[test]
    fn selection_is_invariant_to_entropy_base(seq in prop::collection::vec((0usize..18, any::<bool>()), 0..20)) {
        let engine = small_engine();
        let mut post = engine.uniform_posterior();
        for (c, correct) in seq {
            post = engine.update(&post, engine.candidates().separations()[c], Outcome::from(correct)).unwrap();
        }
        let nats = engine.expected_entropies(&post);
        let bits: Vec<f64> = nats.iter().map(|h| h / std::f64::consts::LN_2).collect();
        let min = nats.iter().copied().fold(f64::INFINITY, f64::min);
        // Away from near-ties, rescaling must not move the argmin.
        let clear = nats.iter().filter(|h| (**h - min).abs() < 1e-9).count() == 1;
        if clear {
            prop_assert_eq!(argmin_with_ties(&nats), argmin_with_ties(&bits));
        }
    }

    #[test]
    fn bonferroni_dominates_and_keeps_order(ps in prop::collection::vec(0.0..=1.0f64, 1..40)) {
        let adj = bonferroni(&ps);
        for i in 0..ps.len() {
            prop_assert!(adj[i] >= ps[i]);
            prop_assert!(adj[i] <= 1.0);
            for j in 0..ps.len() {
                if ps[i] <= ps[j] {
                    prop_assert!(adj[i] <= adj[j]);
                }
            }
        }
    }

    #[test]
    fn binomial_p_is_a_probability(n in 1u64..200, frac in 0.0..=1.0f64) {
        let k = (frac * n as f64).round() as u64;
        let p = binomial_test(k, n, 0.5).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert_eq!(p, binomial_test(n - k, n, 0.5).unwrap());
    }

    #[test]
    fn t_test_sign_flips_with_data(xs in prop::collection::vec(-10.0..10.0f64, 3..30)) {
        let t = t_test_one_sample(&xs, 0.0).unwrap();
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        let u = t_test_one_sample(&neg, 0.0).unwrap();
        prop_assert!((t.t + u.t).abs() < 1e-9 * (1.0 + t.t.abs()));
        prop_assert!((t.p - u.p).abs() < 1e-12);
    }

    #[test]
    fn thresholds_respect_level_order(p in params()) {
        let xs = export_grid();
        let curve = CurveSamples::new(xs.clone(), xs.iter().map(|&x| p.eval(x)).collect(), None).unwrap();
        let report = extract_thresholds(&curve).unwrap();
        let mut seen_unreached = false;
        let mut last = 0.0;
        for t in &report.thresholds {
            match t {
                Threshold::Reached(x) => {
                    prop_assert!(!seen_unreached, "reached after NOT_REACHED");
                    prop_assert!(*x >= last);
                    last = *x;
                }
                Threshold::NotReached => seen_unreached = true,
            }
        }
    }

    #[test]
    fn comparison_ignores_member_order(offsets in prop::collection::vec(-0.05..0.05f64, 3..10), rot in 0usize..10) {
        let reference = synthetic_reference();
        let base = reference.as_curve();
        let curves: Vec<CurveSamples> = offsets
            .iter()
            .map(|o| CurveSamples::new(base.x_values.clone(), base.y_values.iter().map(|y| (y * 0.9 + o).clamp(0.0, 1.0)).collect(), None).unwrap())
            .collect();
        let mut rotated = curves.clone();
        rotated.rotate_left(rot % curves.len());
        let xs = CandidateSet::default().separations().to_vec();
        let a = compare_to_reference(&curves, &reference, &xs, 0.05).unwrap();
        let b = compare_to_reference(&rotated, &reference, &xs, 0.05).unwrap();
        prop_assert_eq!(a.significant, b.significant);
    }
}

#[test]
fn normalized_after_a_thousand_updates() {
    let grid = Arc::new(build_grid(&GridConfig::default()).unwrap());
    let engine = Bape::new(grid, CandidateSet::default());
    let mut post: Posterior = engine.uniform_posterior();
    let xs = engine.candidates().separations().to_vec();
    for k in 0..1000usize {
        // Mostly correct answers at large separations, mostly wrong at small.
        let x = xs[(k * 7) % xs.len()];
        let correct = (k * 31 % 100) < if x > 20.0 { 90 } else { 55 };
        post = engine.update(&post, x, Outcome::from(correct)).unwrap();
    }
    let total: f64 = post.weights().iter().sum();
    assert!((total - 1.0).abs() < 1e-12, "{total}");
    assert_eq!(post.trial_count(), 1000);
}
