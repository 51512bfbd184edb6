use graft_core::metrics::{c_index, concordance_counts, ibs, CensoringKm, EvalGrid};
use graft_core::rng;
use proptest::prelude::*;
use rand::Rng as _;

fn brute_counts(s: &[f64], t: &[f64], e: &[bool]) -> (u64, u64, u64) {
    let (mut conc, mut ties, mut comp) = (0, 0, 0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if e[i] && t[i] < t[j] {
                comp += 1;
                if s[i] < s[j] {
                    conc += 1;
                } else if s[i] == s[j] {
                    ties += 1;
                }
            }
        }
    }
    (conc, ties, comp)
}

/// Random censored instance with tied times and tied scores.
fn instance(r: &mut graft_core::rng::Rng, n: usize) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let s = (0..n).map(|_| (r.random_range(0.0..20.0) as f64).round()).collect();
    let t = (0..n).map(|_| (r.random_range(1.0..30.0) as f64).round()).collect();
    let e = (0..n).map(|_| r.random_bool(0.6)).collect();
    (s, t, e)
}

#[test]
fn c_index_matches_quadratic_oracle() {
    let mut r = rng::stream(8, 0);
    for trial in 0..50 {
        let n = 2 + (trial * 37) % 199;
        let (s, t, e) = instance(&mut r, n);
        let c = concordance_counts(&s, &t, &e).unwrap();
        let (conc, ties, comp) = brute_counts(&s, &t, &e);
        assert_eq!((c.concordant, c.ties, c.comparable), (conc, ties, comp), "trial {trial}");
        if comp > 0 {
            let oracle = (conc as f64 + 0.5 * ties as f64) / comp as f64;
            assert_eq!(c_index(&s, &t, &e).unwrap(), c.value());
            assert!((c.value() - oracle).abs() < 1e-15);
        }
    }
}

/// Product-limit curve of the censoring times, evaluated directly.
fn censoring_survival(times: &[f64], events: &[bool], t: f64, left: bool) -> f64 {
    let mut distinct: Vec<f64> = times.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut s = 1.0;
    for &u in &distinct {
        if (left && u >= t) || (!left && u > t) {
            break;
        }
        let at_risk = times.iter().filter(|&&x| x >= u).count() as f64;
        let censored = times.iter().zip(events).filter(|(&x, &ev)| x == u && !ev).count() as f64;
        s *= 1.0 - censored / at_risk;
    }
    s
}

fn ibs_oracle(
    surv: impl Fn(usize, f64) -> f64,
    test_t: &[f64],
    test_e: &[bool],
    train_t: &[f64],
    train_e: &[bool],
    grid: &[f64],
) -> f64 {
    let bs: Vec<f64> = grid
        .iter()
        .map(|&t| {
            let g_t = censoring_survival(train_t, train_e, t, false);
            let mut total = 0.0;
            for i in 0..test_t.len() {
                let s = surv(i, t);
                if test_t[i] <= t && test_e[i] {
                    total += s * s / censoring_survival(train_t, train_e, test_t[i], true);
                } else if test_t[i] > t {
                    total += (1.0 - s) * (1.0 - s) / g_t;
                }
            }
            total / test_t.len() as f64
        })
        .collect();
    let mut area = 0.0;
    for k in 1..grid.len() {
        area += 0.5 * (bs[k - 1] + bs[k]) * (grid[k] - grid[k - 1]);
    }
    area / (grid[grid.len() - 1] - grid[0])
}

#[test]
fn ibs_matches_direct_summation() {
    let mut r = rng::stream(9, 0);
    for trial in 0..10 {
        let n_train = 80;
        let n_test = 40;
        let train_t: Vec<f64> = (0..n_train).map(|_| r.random_range(0.1..10.0)).collect();
        let train_e: Vec<bool> = (0..n_train).map(|_| r.random_bool(0.7)).collect();
        let test_t: Vec<f64> = (0..n_test).map(|_| r.random_range(0.1..9.0)).collect();
        let test_e: Vec<bool> = (0..n_test).map(|_| r.random_bool(0.7)).collect();
        let rate: Vec<f64> = (0..n_test).map(|_| r.random_range(0.05..0.5)).collect();
        let surv = |i: usize, t: f64| (-rate[i] * t).exp();
        let cens = CensoringKm::fit(&train_t, &train_e).unwrap();
        let grid = EvalGrid::standard(&test_t, &cens, 100).unwrap();
        let fast = ibs(surv, &test_t, &test_e, &grid, &cens).unwrap();
        let slow = ibs_oracle(surv, &test_t, &test_e, &train_t, &train_e, &grid.times);
        assert!((fast - slow).abs() < 1e-10, "trial {trial}: {fast} vs {slow}");
    }
}

#[test]
fn constant_half_without_censoring_is_a_quarter() {
    let mut r = rng::stream(10, 0);
    let t: Vec<f64> = (0..200).map(|_| r.random_range(0.5..20.0)).collect();
    let e = vec![true; 200];
    let cens = CensoringKm::fit(&t, &e).unwrap();
    let grid = EvalGrid::standard(&t, &cens, 100).unwrap();
    let v = ibs(|_, _| 0.5, &t, &e, &grid, &cens).unwrap();
    assert!((v - 0.25).abs() < 1e-12);
}

#[test]
fn marginal_curve_beats_constant_half_without_censoring() {
    use graft_core::data::generate_synthetic;
    use graft_core::km::fit_km;
    let (ds, _) = generate_synthetic(400, 3, 2, 0.0, 12).unwrap();
    let km = fit_km(&ds.times, &ds.events).unwrap();
    let cens = CensoringKm::fit(&ds.times, &ds.events).unwrap();
    let grid = EvalGrid::standard(&ds.times, &cens, 100).unwrap();
    let marginal = ibs(|_, t| km.survival_at(t), &ds.times, &ds.events, &grid, &cens).unwrap();
    let half = ibs(|_, _| 0.5, &ds.times, &ds.events, &grid, &cens).unwrap();
    assert!(marginal <= half, "{marginal} vs {half}");
}

proptest! {
    #[test]
    fn c_index_invariant_to_increasing_maps(seed in any::<u64>(), n in 3usize..80) {
        let mut r = rng::stream(seed, 0);
        let (s, t, e) = instance(&mut r, n);
        let mapped: Vec<f64> = s.iter().map(|v| 3.0 * v + 7.0).collect();
        let a = concordance_counts(&s, &t, &e).unwrap();
        let b = concordance_counts(&mapped, &t, &e).unwrap();
        prop_assert_eq!(a, b);
        let flipped: Vec<f64> = s.iter().map(|v| -v).collect();
        let f = concordance_counts(&flipped, &t, &e).unwrap();
        prop_assert_eq!(f.concordant + a.concordant + a.ties, a.comparable);
    }

    #[test]
    fn ibs_is_bounded_for_valid_curves(seed in any::<u64>()) {
        let mut r = rng::stream(seed, 1);
        let t: Vec<f64> = (0..50).map(|_| r.random_range(0.1..10.0)).collect();
        let e: Vec<bool> = (0..50).map(|_| r.random_bool(0.8)).collect();
        let rate: Vec<f64> = (0..50).map(|_| r.random_range(0.01..2.0)).collect();
        let cens = CensoringKm::fit(&t, &e).unwrap();
        if let Ok(grid) = EvalGrid::standard(&t, &cens, 100) {
            let v = ibs(|i, x| (-rate[i] * x).exp(), &t, &e, &grid, &cens).unwrap();
            prop_assert!(v >= 0.0 && v.is_finite());
        }
    }
}
