use graft_core::gates::{GateParams, GateVariant};
use graft_core::net::{ArchVariant, GraftParams};
use graft_core::rng;
use graft_core::softrank::spearman_loss;
use graft_core::trainer::{total_loss, AdamState, GateDraw, ModelState, TrainConfig};
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng as _;

struct Toy {
    state: ModelState,
    x: Array2<f64>,
    targets: Vec<Vec<f64>>,
    cfg: TrainConfig,
    eps: Vec<f64>,
}

/// 6 subjects, 4 features, random nonzero head so the scores are spread
/// out and the soft ranks sit away from their kinks.
fn toy(variant: GateVariant, arch: ArchVariant, seed: u64) -> Toy {
    let mut r = rng::stream(seed, 0);
    let (m, p) = (6, 4);
    let mut params = GraftParams::init(p, 5, 0.0, arch, 0.3, &mut r);
    for b in params.beta.iter_mut() {
        *b = r.random_range(-1.5..1.5);
    }
    for b in params.b1.iter_mut().chain(params.b2.iter_mut()) {
        *b = r.random_range(-0.3..0.3);
    }
    let mut gates = GateParams::init(p, variant, 0.5, 0.01);
    for e in gates.eta.iter_mut() {
        *e = match variant {
            GateVariant::Sigmoid => r.random_range(-1.0..1.0),
            _ => r.random_range(0.25..0.75),
        };
    }
    let x = Array2::from_shape_fn((m, p), |_| r.random_range(-2.0..2.0));
    let targets = (0..2)
        .map(|_| (0..m).map(|_| r.random_range(0.0..3.0)).collect())
        .collect();
    let eps = (0..p).map(|_| r.random_range(-0.1..0.1)).collect();
    Toy {
        state: ModelState { params, gates },
        x,
        targets,
        cfg: TrainConfig {
            alpha_l2: 1e-3,
            tau: 0.5,
            ..TrainConfig::default()
        },
        eps,
    }
}

fn loss_at(t: &Toy, state: &ModelState, noisy: bool) -> (f64, Vec<f64>) {
    let draw = if noisy {
        GateDraw {
            gates: state.gates.gates_with_noise(&t.eps),
            eps: t.eps.clone(),
        }
    } else {
        GateDraw::deterministic(&state.gates)
    };
    let eval = total_loss(state, t.x.view(), &draw, None, &t.targets, &t.cfg).unwrap();
    (eval.loss, eval.grads)
}

/// Largest relative error between the analytic gradient and central
/// differences over every trainable scalar.
fn max_rel_err(t: &Toy, noisy: bool) -> f64 {
    let (_, grads) = loss_at(t, &t.state, noisy);
    let flat = t.state.flatten();
    assert_eq!(grads.len(), flat.len());
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..flat.len() {
        let mut up = t.state.clone();
        let mut dn = t.state.clone();
        let mut v = flat.clone();
        v[k] += h;
        up.unflatten(&v);
        v[k] -= 2.0 * h;
        dn.unflatten(&v);
        let fd = (loss_at(t, &up, noisy).0 - loss_at(t, &dn, noisy).0) / (2.0 * h);
        let err = (fd - grads[k]).abs() / fd.abs().max(grads[k].abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

#[test]
fn end_to_end_gradient_deterministic_gates() {
    for seed in 0..5 {
        let t = toy(GateVariant::Stg, ArchVariant::Full, seed);
        let e = max_rel_err(&t, false);
        assert!(e < 1e-4, "seed {seed}: {e}");
    }
}

#[test]
fn end_to_end_gradient_with_fixed_gate_noise() {
    for seed in 0..5 {
        let t = toy(GateVariant::Stg, ArchVariant::Full, 10 + seed);
        assert!(max_rel_err(&t, true) < 1e-4);
    }
}

#[test]
fn end_to_end_gradient_other_variants() {
    for (g, a) in [
        (GateVariant::Sigmoid, ArchVariant::Full),
        (GateVariant::None, ArchVariant::Full),
        (GateVariant::None, ArchVariant::NoMlp),
        (GateVariant::Stg, ArchVariant::NoMlp),
    ] {
        for seed in 0..3 {
            let t = toy(g, a, 20 + seed);
            let e = max_rel_err(&t, false);
            assert!(e < 1e-4, "{g:?} {a:?} seed {seed}: {e}");
        }
    }
}

#[test]
fn single_draw_without_penalties_is_the_ranking_loss() {
    let mut t = toy(GateVariant::Stg, ArchVariant::Full, 30);
    t.cfg.alpha_l2 = 0.0;
    t.state.gates.lambda_l0 = 0.0;
    t.targets.truncate(1);
    let draw = GateDraw::deterministic(&t.state.gates);
    let eval = total_loss(&t.state, t.x.view(), &draw, None, &t.targets, &t.cfg).unwrap();
    let (scores, _) = t.state.params.forward(t.x.view(), &draw.gates, None).unwrap();
    let (direct, _) = spearman_loss(scores.as_slice().unwrap(), &t.targets[0], &t.cfg.soft_rank()).unwrap();
    assert_eq!(eval.loss, direct);
}

#[test]
fn l2_term_covers_every_parameter_including_mu() {
    let mut t = toy(GateVariant::Stg, ArchVariant::Full, 31);
    t.state.gates.lambda_l0 = 0.0;
    let draw = GateDraw::deterministic(&t.state.gates);
    let eval = total_loss(&t.state, t.x.view(), &draw, None, &t.targets, &t.cfg).unwrap();
    let sq: f64 = t.state.flatten().iter().map(|v| v * v).sum();
    assert!((eval.l2_penalty - t.cfg.alpha_l2 * sq).abs() < 1e-15);
    assert!(t.state.params.mu != 0.0);
}

#[test]
fn adam_matches_reference_recurrence() {
    // minimise (w - 3)^2 from w = 0
    let lr = 0.1;
    let mut st = AdamState::new(1);
    let mut w = vec![0.0];
    let (mut m, mut v, mut w_ref) = (0.0f64, 0.0f64, 0.0f64);
    for t in 1..=3 {
        let g = 2.0 * (w[0] - 3.0);
        st.step(&mut w, &[g], lr).unwrap();
        let g_ref = 2.0 * (w_ref - 3.0);
        m = 0.9 * m + 0.1 * g_ref;
        v = 0.999 * v + 0.001 * g_ref * g_ref;
        let m_hat = m / (1.0 - 0.9f64.powi(t));
        let v_hat = v / (1.0 - 0.999f64.powi(t));
        w_ref -= lr * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((w[0] - w_ref).abs() < 1e-12);
    }
    assert_eq!(st.step, 3);
}

/// Standard normal CDF by composite Simpson integration of the density.
fn phi_oracle(z: f64) -> f64 {
    let n = 20_000;
    let (a, b) = (-12.0, z);
    let h = (b - a) / n as f64;
    let f = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut acc = f(a) + f(b);
    for k in 1..n {
        acc += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

#[test]
fn l0_penalty_closed_form() {
    let gp = GateParams {
        eta: vec![0.5],
        sigma: 0.5,
        variant: GateVariant::Stg,
        lambda_l0: 0.01,
    };
    let (v, _) = gp.l0_penalty();
    assert!((v - 0.01 * phi_oracle(1.0)).abs() < 1e-12);
    assert!((v - 0.0084134).abs() < 1e-7);
    let zero = GateParams {
        eta: vec![0.0; 4],
        ..gp.clone()
    };
    assert!((zero.l0_penalty().0 - 0.02).abs() < 1e-15);
    let far = GateParams {
        eta: vec![-5.0],
        ..gp
    };
    assert!(far.l0_penalty().0 < 1e-20);
}

proptest! {
    #[test]
    fn l0_gradient_matches_finite_differences(eta in prop::collection::vec(-1.5f64..1.5, 1..8)) {
        let gp = GateParams { eta: eta.clone(), sigma: 0.5, variant: GateVariant::Stg, lambda_l0: 0.01 };
        let (_, g) = gp.l0_penalty();
        let h = 1e-5;
        for j in 0..eta.len() {
            let mut up = gp.clone();
            let mut dn = gp.clone();
            up.eta[j] += h;
            dn.eta[j] -= h;
            let fd = (up.l0_penalty().0 - dn.l0_penalty().0) / (2.0 * h);
            prop_assert!((fd - g[j]).abs() <= 1e-8 * g[j].abs().max(1e-6));
            // monotone non-decreasing in each coordinate
            prop_assert!(up.l0_penalty().0 >= gp.l0_penalty().0);
        }
    }

    #[test]
    fn gate_backward_matches_finite_differences_inside_the_clamp(
        eta in prop::collection::vec(0.1f64..0.9, 1..6),
        seed in any::<u64>(),
    ) {
        let mut r = rng::stream(seed, 0);
        let eps: Vec<f64> = eta.iter().map(|_| r.random_range(-0.05..0.05)).collect();
        let w: Vec<f64> = eta.iter().map(|_| r.random_range(-1.0..1.0)).collect();
        let gp = GateParams { eta: eta.clone(), sigma: 0.5, variant: GateVariant::Stg, lambda_l0: 0.01 };
        // L(g) = sum w_j g_j^2
        let loss = |gp: &GateParams| -> f64 {
            gp.gates_with_noise(&eps).iter().zip(&w).map(|(g, wj)| wj * g * g).sum()
        };
        let g = gp.gates_with_noise(&eps);
        let dl_dg: Vec<f64> = g.iter().zip(&w).map(|(gj, wj)| 2.0 * wj * gj).collect();
        let grad = gp.backward(&eps, &dl_dg);
        let h = 1e-6;
        for j in 0..eta.len() {
            let mut up = gp.clone();
            let mut dn = gp.clone();
            up.eta[j] += h;
            dn.eta[j] -= h;
            let fd = (loss(&up) - loss(&dn)) / (2.0 * h);
            prop_assert!((fd - grad[j]).abs() <= 1e-6 * fd.abs().max(grad[j].abs()).max(1e-3));
        }
    }
}
