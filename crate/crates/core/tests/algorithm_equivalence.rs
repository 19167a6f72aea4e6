//! Model-based policy iteration, Riccati iteration and model-free Q-learning
//! must all land on the same tracking gain for linear plants.

mod common;

use common::{scalar_lqt_gain, LinearEnv};
use qsched_core::gain::{PolicyGain, TrackingWeights};
use qsched_core::lqt::{self, build_augmented, DEFAULT_ARE_MAX_ITER, DEFAULT_ARE_TOL};
use qsched_core::qlearn::{self, q_policy_iteration, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GAMMA: f64 = 0.9;

struct Plant {
    a: f64,
    b: f64,
    q: f64,
    r_u: f64,
}

fn random_plants(n: usize, seed: u64) -> Vec<Plant> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Plant {
            a: rng.random_range(0.5..0.999),
            b: rng.random_range(0.002..0.05),
            q: rng.random_range(1.0..200.0),
            r_u: rng.random_range(1e-4..1e-2),
        })
        .collect()
}

#[test]
fn riccati_iteration_matches_entrywise_recursion() {
    for p in random_plants(20, 11) {
        let model = build_augmented(p.a, p.b, 1.0, 1.0, p.q, p.r_u, GAMMA).unwrap();
        let kp = lqt::are_fixed_point(&model, DEFAULT_ARE_TOL, DEFAULT_ARE_MAX_ITER).unwrap();
        let k = lqt::optimal_gain(&kp, &model).unwrap();
        let expect = scalar_lqt_gain(p.a, p.b, p.q, p.r_u, GAMMA);
        for (got, want) in [k.k_x(), k.k_r()].iter().zip(expect) {
            assert!((got - want).abs() <= 1e-8 * (1.0 + want.abs()), "{got} vs {want}");
        }
    }
}

#[test]
fn policy_iteration_agrees_with_riccati_on_random_plants() {
    for (n, p) in random_plants(100, 2024).into_iter().enumerate() {
        let model = build_augmented(p.a, p.b, 1.0, 1.0, p.q, p.r_u, GAMMA).unwrap();
        let kp = lqt::are_fixed_point(&model, DEFAULT_ARE_TOL, DEFAULT_ARE_MAX_ITER).unwrap();
        let oracle = lqt::optimal_gain(&kp, &model).unwrap();
        let pi = lqt::policy_iteration_model_based(&model, &PolicyGain::zero(), 1e-12, 200).unwrap();
        let gap = pi.gain.distance(&oracle);
        assert!(gap <= 1e-8 * (1.0 + oracle.norm()), "plant {n}: PI {:?} vs ARE {:?}", pi.gain, oracle);
        // every evaluated cost is monotonically non-increasing
        for w in pi.kernels.windows(2) {
            assert!(w[1].p[(0, 0)] <= w[0].p[(0, 0)] + 1e-9 * w[0].p[(0, 0)].abs());
        }
    }
}

#[test]
fn q_learning_agrees_with_riccati_on_random_plants() {
    for (n, p) in random_plants(100, 7).into_iter().enumerate() {
        let model = build_augmented(p.a, p.b, 1.0, 1.0, p.q, p.r_u, GAMMA).unwrap();
        let kp = lqt::are_fixed_point(&model, DEFAULT_ARE_TOL, DEFAULT_ARE_MAX_ITER).unwrap();
        let oracle = lqt::optimal_gain(&kp, &model).unwrap();
        let weights = TrackingWeights::new(p.q, p.r_u, 1.0).unwrap();
        let cfg = TrainConfig {
            seed: n as u64,
            tol: 1e-6,
            ..TrainConfig::default()
        };
        let mut env = LinearEnv::new(p.a, p.b, 5.0, 1000 + n as u64);
        let out = q_policy_iteration(&mut env, &PolicyGain::zero(), &weights, &cfg).unwrap();
        let rel = out.gain.distance(&oracle) / oracle.norm();
        assert!(rel < 1e-3, "plant {n}: Q {:?} vs ARE {:?} ({rel:e})", out.gain, oracle);
        assert!(out.history.iter().all(|h| h.tuples >= cfg.tuples_per_iter));
    }
}

#[test]
fn learned_kernel_matches_model_q_kernel() {
    let p = Plant {
        a: 1.0 - 1e-4 * 2.0 / 16e-3,
        b: 1e-4 / 16e-3,
        q: 100.0,
        r_u: 1e-3,
    };
    let model = build_augmented(p.a, p.b, 1.0, 1.0, p.q, p.r_u, GAMMA).unwrap();
    let weights = TrackingWeights::default();
    let k0 = PolicyGain::new(100.0, -100.0).unwrap();
    let mut env = LinearEnv::new(p.a, p.b, 5.0, 3);
    let out = q_policy_iteration(&mut env, &k0, &weights, &TrainConfig::default()).unwrap();
    // The final kernel evaluates the previous iterate, which is within tol
    // of the returned gain; compare against the model kernel of that policy.
    let prev = out.history[out.history.len().saturating_sub(2)].gain;
    let prev = if out.history.len() > 1 { prev } else { k0 };
    let p_prev = lqt::evaluate_policy(&model, &prev).unwrap();
    let g_model = lqt::q_kernel_from_value(&p_prev, &model);
    let diff = (out.kernel.g - g_model.g).abs().max();
    assert!(diff <= 1e-6 * g_model.g.abs().max(), "kernel gap {diff}");
    assert_eq!(qlearn::policy_improvement(&out.kernel).unwrap(), out.gain);
}

#[test]
fn published_setup_converges_from_published_initial_gain() {
    let weights = TrackingWeights::default();
    let k0 = PolicyGain::new(100.0, -100.0).unwrap();
    let (a, b) = qsched_core::plant::discretize(2.0, 1e-4, 16e-3);
    let mut env = LinearEnv::new(a, b, 5.0, 99);
    let out = q_policy_iteration(&mut env, &k0, &weights, &TrainConfig::default()).unwrap();
    let [kx, kr] = scalar_lqt_gain(a, b, 100.0, 1e-3, GAMMA);
    assert!((out.gain.k_x() - kx).abs() / kx < 1e-3);
    assert!((out.gain.k_r() - kr).abs() / kr.abs() < 1e-3);
    assert!(out.iterations < 20);
}
