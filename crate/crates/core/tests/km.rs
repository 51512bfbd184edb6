use graft_core::km::fit_km;
use graft_core::rng;
use proptest::prelude::*;
use rand::Rng as _;

/// `(time, S(time))` pairs built by hand, one factor `1 - d/n` per event
/// time, in the same order the estimator multiplies them.
struct Case {
    times: Vec<f64>,
    events: Vec<bool>,
    expected: Vec<(f64, f64)>,
}

fn crafted_cases() -> Vec<Case> {
    vec![
        // one censoring between two events
        Case {
            times: vec![1.0, 2.0, 3.0],
            events: vec![true, false, true],
            expected: vec![(1.0, 1.0 * (1.0 - 1.0 / 3.0)), (3.0, 1.0 * (1.0 - 1.0 / 3.0) * (1.0 - 1.0 / 1.0))],
        },
        // tied events, and an event tied with a censoring
        Case {
            times: vec![2.0, 2.0, 3.0, 4.0, 4.0, 5.0],
            events: vec![true, true, false, true, false, true],
            expected: vec![
                (2.0, 1.0 * (1.0 - 2.0 / 6.0)),
                (4.0, 1.0 * (1.0 - 2.0 / 6.0) * (1.0 - 1.0 / 3.0)),
                (5.0, 1.0 * (1.0 - 2.0 / 6.0) * (1.0 - 1.0 / 3.0) * (1.0 - 1.0 / 1.0)),
            ],
        },
        // trailing censoring keeps the curve above zero
        Case {
            times: vec![1.0, 2.0, 3.0, 4.0],
            events: vec![true, true, false, false],
            expected: vec![(1.0, 1.0 * (1.0 - 1.0 / 4.0)), (2.0, 1.0 * (1.0 - 1.0 / 4.0) * (1.0 - 1.0 / 3.0))],
        },
        // unsorted input, no censoring
        Case {
            times: vec![3.0, 1.0, 2.0, 4.0],
            events: vec![true; 4],
            expected: vec![
                (1.0, 1.0 * (1.0 - 1.0 / 4.0)),
                (2.0, 1.0 * (1.0 - 1.0 / 4.0) * (1.0 - 1.0 / 3.0)),
                (3.0, 1.0 * (1.0 - 1.0 / 4.0) * (1.0 - 1.0 / 3.0) * (1.0 - 1.0 / 2.0)),
                (4.0, 1.0 * (1.0 - 1.0 / 4.0) * (1.0 - 1.0 / 3.0) * (1.0 - 1.0 / 2.0) * (1.0 - 1.0 / 1.0)),
            ],
        },
        // event and censoring at the same time: the event sees both at risk
        Case {
            times: vec![1.0, 1.0, 2.0],
            events: vec![true, false, true],
            expected: vec![(1.0, 1.0 * (1.0 - 1.0 / 3.0)), (2.0, 1.0 * (1.0 - 1.0 / 3.0) * (1.0 - 1.0 / 1.0))],
        },
        // leading censorings shrink the first risk set
        Case {
            times: vec![0.5, 0.7, 1.0, 2.0, 2.0],
            events: vec![false, false, true, true, false],
            expected: vec![(1.0, 1.0 * (1.0 - 1.0 / 3.0)), (2.0, 1.0 * (1.0 - 1.0 / 3.0) * (1.0 - 1.0 / 2.0))],
        },
    ]
}

#[test]
fn product_limit_matches_hand_computation_exactly() {
    for (c, case) in crafted_cases().into_iter().enumerate() {
        let km = fit_km(&case.times, &case.events).unwrap();
        let times: Vec<f64> = case.expected.iter().map(|e| e.0).collect();
        let probs: Vec<f64> = case.expected.iter().map(|e| e.1).collect();
        assert_eq!(km.event_times, times, "case {c}");
        assert_eq!(km.surv_probs, probs, "case {c}");
        for &(t, s) in &case.expected {
            assert_eq!(km.survival_at(t), s, "case {c} at {t}");
        }
    }
}

#[test]
fn conditional_masses_are_survival_increments() {
    let times = [1.0, 2.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
    let events = [true, true, false, true, false, true, true, false, true, false];
    let km = fit_km(&times, &events).unwrap();
    let t_c = 2.5;
    let cdf = km.condition_beyond(t_c);
    let s_c = km.survival_at(t_c);
    // P(T = t_k | T > t_c) = (S(t_k-) - S(t_k)) / S(t_c)
    let oracle: Vec<f64> = cdf
        .support
        .iter()
        .map(|&t| (km.survival_before(t) - km.survival_at(t)) / s_c)
        .collect();
    for (a, b) in cdf.atom_masses().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(cdf.support.iter().all(|&t| t > t_c));
}

#[test]
fn conditional_sampling_frequencies() {
    let times = [1.0, 2.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
    let events = [true, true, false, true, false, true, true, false, true, false];
    let km = fit_km(&times, &events).unwrap();
    let cdf = km.condition_beyond(2.5);
    let masses = cdf.atom_masses();
    let n = 100_000;
    let mut counts = vec![0usize; cdf.support.len()];
    let mut r = rng::stream(42, 0);
    for _ in 0..n {
        let t = cdf.sample_time(r.random::<f64>()).unwrap();
        let k = cdf.support.iter().position(|&s| s == t).unwrap();
        counts[k] += 1;
    }
    for (k, &m) in masses.iter().enumerate() {
        let p = m / cdf.total_mass;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        let freq = counts[k] as f64 / n as f64;
        assert!((freq - p).abs() < 3.0 * se, "atom {k}: {freq} vs {p}");
    }
}

#[test]
fn conditioning_past_last_event_is_degenerate() {
    let km = fit_km(&[1.0, 2.0, 3.0], &[true, true, false]).unwrap();
    let cdf = km.condition_beyond(2.0);
    assert!(cdf.degenerate);
    assert!(cdf.sample_time(0.5).is_err());
}

proptest! {
    #[test]
    fn survival_is_a_nonincreasing_probability(
        data in prop::collection::vec((0.01f64..100.0, any::<bool>()), 1..60),
        probes in prop::collection::vec(0.0f64..120.0, 1..20),
    ) {
        let times: Vec<f64> = data.iter().map(|d| (d.0 * 4.0).round() / 4.0 + 0.25).collect();
        let events: Vec<bool> = data.iter().map(|d| d.1).collect();
        let km = fit_km(&times, &events).unwrap();
        for w in km.surv_probs.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        let mut sorted = probes.clone();
        sorted.sort_by(f64::total_cmp);
        let mut prev = 1.0;
        for t in sorted {
            let s = km.survival_at(t);
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert!(s <= prev);
            prop_assert!(km.survival_before(t) >= s);
            prev = s;
        }
    }

    #[test]
    fn conditional_cdf_is_monotone_and_bounded(
        data in prop::collection::vec((0.01f64..50.0, any::<bool>()), 2..60),
        t_c in 0.0f64..50.0,
        u in 0.0f64..1.0,
    ) {
        let times: Vec<f64> = data.iter().map(|d| d.0).collect();
        let events: Vec<bool> = data.iter().map(|d| d.1).collect();
        let cdf = fit_km(&times, &events).unwrap().condition_beyond(t_c);
        for w in cdf.cdf_vals.windows(2) {
            prop_assert!(w[1] >= w[0]);
        }
        prop_assert!(cdf.total_mass <= 1.0 + 1e-12);
        if !cdf.degenerate {
            let t = cdf.sample_time(u).unwrap();
            prop_assert!(t > t_c);
            prop_assert!(cdf.support.contains(&t));
        }
    }
}
