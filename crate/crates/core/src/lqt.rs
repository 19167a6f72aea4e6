//! Model-based linear quadratic tracker for the augmented phase model.
//!
//! This is the ground truth the model-free learner is checked against: the
//! discounted Riccati fixed point and exact policy iteration on
//! `X_{k+1} = A_a X_k + B_b u_k`, `X = [x, r]`.

use nalgebra::{Matrix2, Matrix3, RowVector2, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::gain::{PolicyGain, TrackingWeights};
use crate::plant::MotorParams;
use crate::qlearn::QKernel;

pub const DEFAULT_ARE_TOL: f64 = 1e-10;
pub const DEFAULT_ARE_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentedModel {
    pub a_a: Matrix2<f64>,
    pub b_b: Vector2<f64>,
    pub c_c: RowVector2<f64>,
    pub q_q: Matrix2<f64>,
    pub r_u: f64,
    pub gamma: f64,
}

/// Assembles `A_a = diag(A, F)`, `B_b = [B, 0]ᵀ`, `C_c = [C, 0]` and
/// `Q_q = [C -1]ᵀ Q [C -1]`.
pub fn build_augmented(a: f64, b: f64, c: f64, f: f64, q: f64, r_u: f64, gamma: f64) -> Result<AugmentedModel> {
    for (name, v) in [("A", a), ("B", b), ("C", c), ("F", f), ("Q", q), ("R", r_u), ("gamma", gamma)] {
        if !v.is_finite() {
            return Err(Error::InvalidParams(format!("{name} is not finite")));
        }
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidParams(format!("discount gamma must lie in (0, 1], got {gamma}")));
    }
    let weights = TrackingWeights::new(q, r_u, c)?;
    Ok(AugmentedModel {
        a_a: Matrix2::new(a, 0.0, 0.0, f),
        b_b: Vector2::new(b, 0.0),
        c_c: RowVector2::new(c, 0.0),
        q_q: weights.q_q(),
        r_u,
        gamma,
    })
}

/// Augmented model of the phase with its inductance frozen at `inductance`
/// and a flat reference (`F = 1`, `C = 1`).
pub fn frozen_model(
    params: &MotorParams,
    inductance: f64,
    weights: &TrackingWeights,
    gamma: f64,
) -> Result<AugmentedModel> {
    let (a, b) = params.discretize(inductance);
    build_augmented(a, b, weights.c, 1.0, weights.q, weights.r_u, gamma)
}

/// Value kernel: `V(X) = ½ Xᵀ P X`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelP {
    pub p: Matrix2<f64>,
}

impl AugmentedModel {
    /// Right-hand side of the discounted Riccati equation evaluated at `p`.
    pub fn riccati_map(&self, p: &Matrix2<f64>) -> Result<Matrix2<f64>> {
        let g = self.gamma;
        let pb = p * self.b_b;
        let s = self.r_u + g * (self.b_b.transpose() * pb)[0];
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::Singular("R + gamma·BᵀPB"));
        }
        let at_pb = self.a_a.transpose() * pb;
        Ok(self.q_q + g * self.a_a.transpose() * p * self.a_a - (g * g / s) * at_pb * at_pb.transpose())
    }

    /// Frobenius norm of `P - riccati_map(P)`.
    pub fn are_residual(&self, p: &Matrix2<f64>) -> Result<f64> {
        Ok((self.riccati_map(p)? - p).norm())
    }

    pub fn closed_loop(&self, gain: &PolicyGain) -> Matrix2<f64> {
        self.a_a - self.b_b * gain.k
    }

    /// Spectral radius of `√γ (A_a − B_b K)`.
    pub fn discounted_spectral_radius(&self, gain: &PolicyGain) -> f64 {
        spectral_radius(&(self.gamma.sqrt() * self.closed_loop(gain)))
    }
}

fn spectral_radius(m: &Matrix2<f64>) -> f64 {
    let tr = m.trace();
    let det = m.determinant();
    let disc = tr * tr / 4.0 - det;
    if disc >= 0.0 {
        let s = disc.sqrt();
        (tr / 2.0 + s).abs().max((tr / 2.0 - s).abs())
    } else {
        // complex pair: |λ|² = det
        det.abs().sqrt()
    }
}

/// Iterates the Riccati map from `P = 0` until the returned kernel's
/// residual falls below `tol`.
pub fn are_fixed_point(model: &AugmentedModel, tol: f64, max_iter: usize) -> Result<KernelP> {
    let mut p = Matrix2::zeros();
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let next = model.riccati_map(&p)?;
        residual = (next - p).norm();
        if !residual.is_finite() {
            break;
        }
        if residual < tol {
            return Ok(KernelP { p });
        }
        p = next;
    }
    Err(Error::NotConverged {
        iterations: max_iter,
        residual,
    })
}

/// `K = (R + γ BᵀPB)⁻¹ γ BᵀPA`.
pub fn optimal_gain(kernel: &KernelP, model: &AugmentedModel) -> Result<PolicyGain> {
    let g = model.gamma;
    let bt_p = model.b_b.transpose() * kernel.p;
    let s = model.r_u + g * (bt_p * model.b_b)[0];
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::Singular("R + gamma·BᵀPB"));
    }
    let k = (g / s) * bt_p * model.a_a;
    PolicyGain::new(k[0], k[1])
}

/// Exact policy evaluation: the symmetric `P` solving
/// `P = Q_q + KᵀRK + γ (A_a − B_bK)ᵀ P (A_a − B_bK)`.
///
/// Vectorized over the three free entries `(p11, p12, p22)`.
pub fn evaluate_policy(model: &AugmentedModel, gain: &PolicyGain) -> Result<KernelP> {
    let m = model.closed_loop(gain);
    let g = model.gamma;
    let weight = model.q_q + gain.k.transpose() * model.r_u * gain.k;
    let idx = [(0usize, 0usize), (0, 1), (1, 1)];
    let mut lhs = Matrix3::zeros();
    let mut rhs = Vector3::zeros();
    for (row, &(i, j)) in idx.iter().enumerate() {
        // coefficient of p11, p12 (both off-diagonal slots) and p22 in (MᵀPM)_ij
        let c11 = m[(0, i)] * m[(0, j)];
        let c12 = m[(0, i)] * m[(1, j)] + m[(1, i)] * m[(0, j)];
        let c22 = m[(1, i)] * m[(1, j)];
        lhs[(row, 0)] = -g * c11;
        lhs[(row, 1)] = -g * c12;
        lhs[(row, 2)] = -g * c22;
        lhs[(row, row)] += 1.0;
        rhs[row] = weight[(i, j)];
    }
    let sol = lhs.lu().solve(&rhs).ok_or(Error::Singular("policy evaluation system"))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("policy evaluation system"));
    }
    Ok(KernelP {
        p: Matrix2::new(sol[0], sol[1], sol[1], sol[2]),
    })
}

/// Q-kernel of the policy that is greedy with respect to `P`:
/// `G = [[Q_q + γAᵀPA, γAᵀPB], [γBᵀPA, R + γBᵀPB]]`.
pub fn q_kernel_from_value(kernel: &KernelP, model: &AugmentedModel) -> QKernel {
    let g = model.gamma;
    let p = &kernel.p;
    let xx = model.q_q + g * model.a_a.transpose() * p * model.a_a;
    let xu = g * model.a_a.transpose() * p * model.b_b;
    let uu = model.r_u + g * (model.b_b.transpose() * p * model.b_b)[0];
    QKernel::new(Matrix3::new(
        xx[(0, 0)], xx[(0, 1)], xu[0],
        xx[(1, 0)], xx[(1, 1)], xu[1],
        xu[0], xu[1], uu,
    ))
}

#[derive(Debug, Clone)]
pub struct PolicyIterationOutcome {
    pub kernel: KernelP,
    pub gain: PolicyGain,
    pub iterations: usize,
    /// Evaluated kernel of every iterate, in order.
    pub kernels: Vec<KernelP>,
}

/// Model-based policy iteration: exact evaluation alternating with greedy
/// improvement, stopped when the gain moves less than `tol`.
pub fn policy_iteration_model_based(
    model: &AugmentedModel,
    k0: &PolicyGain,
    tol: f64,
    max_iter: usize,
) -> Result<PolicyIterationOutcome> {
    let rho = model.discounted_spectral_radius(k0);
    if !(rho < 1.0) {
        return Err(Error::NotStabilizing { spectral_radius: rho });
    }
    let mut gain = *k0;
    let mut kernels = Vec::new();
    for it in 1..=max_iter {
        let kernel = evaluate_policy(model, &gain)?;
        kernels.push(kernel);
        let next = optimal_gain(&kernel, model)?;
        let step = next.distance(&gain);
        if !step.is_finite() {
            break;
        }
        gain = next;
        if step < tol {
            return Ok(PolicyIterationOutcome {
                kernel,
                gain,
                iterations: it,
                kernels,
            });
        }
    }
    Err(Error::NotConverged {
        iterations: max_iter,
        residual: f64::NAN,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn default_model(inductance: f64) -> AugmentedModel {
        let (a, b) = crate::plant::discretize(2.0, 1e-4, inductance);
        build_augmented(a, b, 1.0, 1.0, 100.0, 1e-3, 0.9).unwrap()
    }

    #[test]
    fn augmented_blocks() {
        let m = build_augmented(0.96667, 0.016667, 1.0, 1.0, 100.0, 1e-3, 0.9).unwrap();
        assert_eq!(m.q_q, Matrix2::new(100.0, -100.0, -100.0, 100.0));
        assert_eq!(m.a_a, Matrix2::new(0.96667, 0.0, 0.0, 1.0));
        assert_eq!(m.b_b, Vector2::new(0.016667, 0.0));
        assert_eq!(m.c_c, RowVector2::new(1.0, 0.0));
        let zero = build_augmented(0.9, 0.1, 1.0, 1.0, 0.0, 1e-3, 0.9).unwrap();
        assert_eq!(zero.q_q, Matrix2::zeros());
    }

    #[test]
    fn augmented_rejects_bad_discount_and_weight() {
        assert!(build_augmented(0.9, 0.1, 1.0, 1.0, 1.0, 1.0, 0.0).is_err());
        assert!(build_augmented(0.9, 0.1, 1.0, 1.0, 1.0, 1.0, 1.2).is_err());
        assert!(build_augmented(0.9, 0.1, 1.0, 1.0, 1.0, 0.0, 0.9).is_err());
        assert!(build_augmented(0.9, 0.1, 1.0, 1.0, 1.0, -1.0, 0.9).is_err());
        assert!(build_augmented(0.9, 0.1, 1.0, 1.0, 1.0, 1.0, 1.0).is_ok());
    }

    #[test]
    fn zero_weight_gives_zero_kernel() {
        let (a, b) = crate::plant::discretize(2.0, 1e-4, 16e-3);
        let m = build_augmented(a, b, 1.0, 1.0, 0.0, 1e-3, 0.9).unwrap();
        let p = are_fixed_point(&m, DEFAULT_ARE_TOL, DEFAULT_ARE_MAX_ITER).unwrap();
        assert_eq!(p.p, Matrix2::zeros());
        assert_eq!(optimal_gain(&p, &m).unwrap(), PolicyGain::zero());
    }

    #[test]
    fn gain_from_identity_kernel() {
        let m = AugmentedModel {
            a_a: Matrix2::identity(),
            b_b: Vector2::new(1.0, 0.0),
            c_c: RowVector2::new(1.0, 0.0),
            q_q: Matrix2::identity(),
            r_u: 1.0,
            gamma: 0.9,
        };
        let k = optimal_gain(&KernelP { p: Matrix2::identity() }, &m).unwrap();
        assert_relative_eq!(k.k_x(), 0.9 / 1.9, max_relative = 1e-15);
        assert_eq!(k.k_r(), 0.0);
    }

    #[test]
    fn aligned_plant_gain_near_published_value() {
        let m = default_model(16e-3);
        let p = are_fixed_point(&m, DEFAULT_ARE_TOL, DEFAULT_ARE_MAX_ITER).unwrap();
        assert!(m.are_residual(&p.p).unwrap() < DEFAULT_ARE_TOL);
        let k = optimal_gain(&p, &m).unwrap();
        assert!((k.k_x() - 120.0).abs() / 120.0 < 0.15, "{k:?}");
        assert!((k.k_r() + 122.0).abs() / 122.0 < 0.15, "{k:?}");
    }

    #[test]
    fn policy_iteration_from_published_initial_gain() {
        let m = default_model(16e-3);
        let k0 = PolicyGain::new(100.0, -100.0).unwrap();
        let pi = policy_iteration_model_based(&m, &k0, 1e-10, 100).unwrap();
        let are = are_fixed_point(&m, DEFAULT_ARE_TOL, DEFAULT_ARE_MAX_ITER).unwrap();
        let k_are = optimal_gain(&are, &m).unwrap();
        assert!(pi.gain.distance(&k_are) < 1e-8);
        assert!((pi.kernel.p - are.p).norm() < 1e-6);
    }

    #[test]
    fn policy_iteration_fixed_point_takes_one_step() {
        let m = default_model(6e-3);
        let are = are_fixed_point(&m, DEFAULT_ARE_TOL, DEFAULT_ARE_MAX_ITER).unwrap();
        let k_star = optimal_gain(&are, &m).unwrap();
        let pi = policy_iteration_model_based(&m, &k_star, 1e-8, 100).unwrap();
        assert_eq!(pi.iterations, 1);
        assert!(pi.gain.distance(&k_star) < 1e-8);
    }

    #[test]
    fn non_stabilizing_initial_gain_rejected() {
        let m = default_model(16e-3);
        // A − B·K_x = 0.9875 − 0.00625·1000 ≈ −5.26
        let bad = PolicyGain::new(1000.0, 0.0).unwrap();
        assert!(matches!(
            policy_iteration_model_based(&m, &bad, 1e-8, 10),
            Err(Error::NotStabilizing { .. })
        ));
    }

    #[test]
    fn evaluation_satisfies_lyapunov_identity() {
        let m = default_model(11e-3);
        let k = PolicyGain::new(100.0, -100.0).unwrap();
        let p = evaluate_policy(&m, &k).unwrap().p;
        let ac = m.closed_loop(&k);
        let rhs = m.q_q + k.k.transpose() * m.r_u * k.k + m.gamma * ac.transpose() * p * ac;
        assert!((rhs - p).norm() < 1e-9 * p.norm());
    }

    #[test]
    fn are_reports_non_convergence() {
        let m = default_model(16e-3);
        assert!(matches!(are_fixed_point(&m, 1e-10, 3), Err(Error::NotConverged { iterations: 3, .. })));
    }
}
