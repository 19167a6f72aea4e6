#![allow(dead_code)]

use qsched_core::error::{Error, Result};
use qsched_core::gain::AugState;
use qsched_core::qlearn::{Environment, Transition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `x' = a·x + b·u` with a fresh reference level after every sample.
pub struct LinearEnv {
    pub a: f64,
    pub b: f64,
    pub r_max: f64,
    x: f64,
    r: f64,
    rng: ChaCha8Rng,
}

impl LinearEnv {
    pub fn new(a: f64, b: f64, r_max: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = rng.random_range(0.0..=r_max);
        Self { a, b, r_max, x: 0.0, r, rng }
    }
}

impl Environment for LinearEnv {
    fn observe(&self) -> AugState {
        AugState::new(self.x, self.r)
    }

    fn step(&mut self, u: f64) -> Result<Transition> {
        if !u.is_finite() {
            return Err(Error::NonFinite("input"));
        }
        self.x = self.a * self.x + self.b * u;
        let next = AugState::new(self.x, self.r);
        self.r = self.rng.random_range(0.0..=self.r_max);
        Ok(Transition { applied_u: u, next })
    }
}

/// Scalar discounted LQT gain by brute-force value iteration on the 2×2
/// Riccati recursion, written out entrywise.
pub fn scalar_lqt_gain(a: f64, b: f64, q: f64, r_u: f64, gamma: f64) -> [f64; 2] {
    // P = [[p11, p12], [p12, p22]], A = diag(a, 1), B = [b, 0], Qq = q·[[1,-1],[-1,1]]
    let (mut p11, mut p12, mut p22) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200_000 {
        let s = r_u + gamma * b * b * p11;
        let h1 = gamma * b * p11 * a;
        let h2 = gamma * b * p12;
        let n11 = q + gamma * a * a * p11 - h1 * h1 / s;
        let n12 = -q + gamma * a * p12 - h1 * h2 / s;
        let n22 = q + gamma * p22 - h2 * h2 / s;
        let delta = (n11 - p11).abs() + (n12 - p12).abs() + (n22 - p22).abs();
        p11 = n11;
        p12 = n12;
        p22 = n22;
        if delta < 1e-12 * (1.0 + p11.abs()) {
            break;
        }
    }
    let s = r_u + gamma * b * b * p11;
    [gamma * b * p11 * a / s, gamma * b * p12 / s]
}
