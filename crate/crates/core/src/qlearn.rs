//! Model-free Q-learning for the tracking problem.
//!
//! The learner only sees augmented states, applied inputs and stage costs.
//! It fits the quadratic Q-kernel `G` over `M = [x, r, u]` from sampled
//! Bellman identities and improves the policy from `G`'s input blocks.
//! Nothing in this module knows the plant coefficients.

use nalgebra::{DMatrix, DVector, Matrix3, RowVector2, SMatrix, SVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gain::{AugState, PolicyGain, TrackingWeights};

/// Independent entries of a symmetric 3×3 kernel.
pub const KERNEL_PARAMS: usize = 6;

/// Minimum tuples per evaluation: `n(n+1)/2` for `n = 3` (state, reference,
/// input).
pub const MIN_TUPLES: usize = KERNEL_PARAMS;

pub type KernelVec = SVector<f64, KERNEL_PARAMS>;

/// Relative singular-value cutoff (after column equilibration) below which
/// the design is treated as rank deficient.
const RANK_TOL: f64 = 1e-10;

/// A rank-deficient batch is topped up one tuple at a time, up to this
/// multiple of the nominal batch size.
pub const TOP_UP_FACTOR: usize = 4;

/// `Q(X, u) = ½ MᵀGM` with `M = [x, r, u]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QKernel {
    pub g: Matrix3<f64>,
}

impl QKernel {
    /// Symmetrizes `g`.
    pub fn new(g: Matrix3<f64>) -> Self {
        Self {
            g: 0.5 * (g + g.transpose()),
        }
    }

    /// Fixed order `[G_xx, G_xr, G_xu, G_rr, G_ru, G_uu]`.
    pub fn from_vec(v: &KernelVec) -> Self {
        Self {
            g: Matrix3::new(v[0], v[1], v[2], v[1], v[3], v[4], v[2], v[4], v[5]),
        }
    }

    pub fn to_vec(&self) -> KernelVec {
        let g = &self.g;
        KernelVec::from([g[(0, 0)], g[(0, 1)], g[(0, 2)], g[(1, 1)], g[(1, 2)], g[(2, 2)]])
    }

    pub fn g_xx(&self) -> nalgebra::Matrix2<f64> {
        self.g.fixed_view::<2, 2>(0, 0).into_owned()
    }

    pub fn g_xu(&self) -> nalgebra::Vector2<f64> {
        self.g.fixed_view::<2, 1>(0, 2).into_owned()
    }

    pub fn g_ux(&self) -> RowVector2<f64> {
        self.g.fixed_view::<1, 2>(2, 0).into_owned()
    }

    pub fn g_uu(&self) -> f64 {
        self.g[(2, 2)]
    }

    pub fn asymmetry(&self) -> f64 {
        (self.g - self.g.transpose()).amax()
    }
}

pub fn q_value(kernel: &QKernel, state: &AugState, u: f64) -> f64 {
    let m = Vector3::new(state[0], state[1], u);
    0.5 * (m.transpose() * kernel.g * m)[0]
}

/// Greedy gain `K = G_uu⁻¹ G_uX`.
pub fn policy_improvement(kernel: &QKernel) -> Result<PolicyGain> {
    let guu = kernel.g_uu();
    if !(guu.is_finite() && guu > 0.0) {
        return Err(Error::NonPositiveGuu(guu));
    }
    let k = kernel.g_ux() / guu;
    PolicyGain::new(k[0], k[1])
}

pub use crate::gain::stage_cost;

/// One sampled transition: `M_k = [x_k, r_k, u_k]` with the input actually
/// applied, `M_{k+1} = [x_{k+1}, r_{k+1}, u']` with `u'` chosen by the
/// policy under evaluation, and the stage cost at `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataTuple {
    pub m_k: Vector3<f64>,
    pub m_next: Vector3<f64>,
    pub stage_cost: f64,
}

impl DataTuple {
    pub fn new(m_k: Vector3<f64>, m_next: Vector3<f64>, stage_cost: f64) -> Result<Self> {
        if m_k.iter().chain(m_next.iter()).any(|v| !v.is_finite()) || !stage_cost.is_finite() {
            return Err(Error::NonFinite("data tuple"));
        }
        if stage_cost < 0.0 {
            return Err(Error::InvalidParams(format!("stage cost must be >= 0, got {stage_cost}")));
        }
        Ok(Self {
            m_k,
            m_next,
            stage_cost,
        })
    }

    /// Builds a tuple from an observed transition and the successor action
    /// of `policy`.
    pub fn from_transition(
        state: &AugState,
        applied_u: f64,
        next: &AugState,
        policy: &PolicyGain,
        weights: &TrackingWeights,
    ) -> Result<Self> {
        Self::new(
            Vector3::new(state[0], state[1], applied_u),
            Vector3::new(next[0], next[1], policy.control(next)),
            weights.stage_cost(state, applied_u),
        )
    }

    /// `φ(M_k) − γ φ(M_{k+1})`.
    pub fn bellman_row(&self, gamma: f64) -> KernelVec {
        quadratic_basis(&self.m_k) - gamma * quadratic_basis(&self.m_next)
    }
}

/// Quadratic monomials of `M` with cross terms doubled, so that
/// `φ(M)·vec(G) = MᵀGM` for symmetric `G`.
pub fn quadratic_basis(m: &Vector3<f64>) -> KernelVec {
    let (x, r, u) = (m[0], m[1], m[2]);
    KernelVec::from([x * x, 2.0 * x * r, 2.0 * x * u, r * r, 2.0 * r * u, u * u])
}

/// Stacks one Bellman row and one stage-cost target per tuple.
pub fn build_ls_rows(tuples: &[DataTuple], gamma: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if tuples.len() < MIN_TUPLES {
        return Err(Error::InsufficientData {
            got: tuples.len(),
            need: MIN_TUPLES,
        });
    }
    let mut design = DMatrix::zeros(tuples.len(), KERNEL_PARAMS);
    let mut targets = DVector::zeros(tuples.len());
    for (i, t) in tuples.iter().enumerate() {
        design.set_row(i, &t.bellman_row(gamma).transpose());
        targets[i] = t.stage_cost;
    }
    Ok((design, targets))
}

/// Least-squares kernel from a stacked Bellman design.
///
/// Solved through an SVD of the column-equilibrated design rather than the
/// normal equations: the monomials span many decades (`u²` against `x²`), and
/// squaring the condition number loses the `G_uu` block entirely.
pub fn batch_ls_solve(design: &DMatrix<f64>, targets: &DVector<f64>) -> Result<QKernel> {
    if design.ncols() != KERNEL_PARAMS || design.nrows() != targets.len() {
        return Err(Error::InvalidParams(format!(
            "design must be n x {KERNEL_PARAMS} with n targets, got {}x{} and {}",
            design.nrows(),
            design.ncols(),
            targets.len()
        )));
    }
    if design.nrows() < MIN_TUPLES {
        return Err(Error::InsufficientData {
            got: design.nrows(),
            need: MIN_TUPLES,
        });
    }
    if design.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("regression design"));
    }
    let (scaled, scale) = equilibrate(design);
    let svd = scaled.svd(true, true);
    let cutoff = check_rank(&svd.singular_values)?;
    let y = svd
        .solve(targets, cutoff)
        .map_err(|_| Error::Singular("least-squares design"))?;
    let v = KernelVec::from_fn(|j, _| y[j] / scale[j]);
    Ok(QKernel::from_vec(&v))
}

/// Divides every column by its norm; zero columns are left alone.
fn equilibrate(design: &DMatrix<f64>) -> (DMatrix<f64>, [f64; KERNEL_PARAMS]) {
    let mut scaled = design.clone();
    let mut scale = [1.0; KERNEL_PARAMS];
    for (j, s) in scale.iter_mut().enumerate() {
        let n = design.column(j).norm();
        if n > 0.0 {
            *s = n;
            scaled.column_mut(j).unscale_mut(n);
        }
    }
    (scaled, scale)
}

/// Fails unless all singular values clear the relative rank tolerance;
/// returns the cutoff.
fn check_rank(singular_values: &DVector<f64>) -> Result<f64> {
    let sigma_max = singular_values.max();
    let cutoff = sigma_max * RANK_TOL;
    let rank = singular_values.iter().filter(|&&s| s > cutoff).count();
    if rank < KERNEL_PARAMS || sigma_max == 0.0 {
        return Err(Error::RankDeficient {
            rank,
            needed: KERNEL_PARAMS,
        });
    }
    Ok(cutoff)
}

/// Recursive least-squares estimate of the kernel parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RlsState {
    pub g_vec: KernelVec,
    /// Covariance.
    pub eta: SMatrix<f64, KERNEL_PARAMS, KERNEL_PARAMS>,
}

impl RlsState {
    /// Starts at `g0` with covariance `τ I`.
    pub fn new(g0: KernelVec, tau: f64) -> Self {
        Self {
            g_vec: g0,
            eta: SMatrix::identity() * tau,
        }
    }

    pub fn kernel(&self) -> QKernel {
        QKernel::from_vec(&self.g_vec)
    }

    /// One RLS step on regressor `row` and target `target`; returns the prior
    /// error `target − rowᵀg`.
    pub fn update(&mut self, row: &KernelVec, target: f64) -> f64 {
        let e = target - row.dot(&self.g_vec);
        let eta_row = self.eta * row;
        let denom = 1.0 + row.dot(&eta_row);
        self.g_vec += eta_row * (e / denom);
        self.eta -= eta_row * eta_row.transpose() / denom;
        // keep the covariance exactly symmetric against round-off drift
        self.eta = 0.5 * (self.eta + self.eta.transpose());
        e
    }
}

/// Functional form of [`RlsState::update`].
pub fn rls_update(state: &RlsState, row: &KernelVec, target: f64) -> RlsState {
    let mut next = state.clone();
    next.update(row, target);
    next
}

/// What the learner gets back from one interaction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    /// Input the actuator actually applied (after any saturation).
    pub applied_u: f64,
    pub next: AugState,
}

/// Black-box access to a plant plus its reference generator.
///
/// `step` returns the successor generated by the same reference segment as
/// the current observation. The environment may start a new segment
/// afterwards, which shows up in the next `observe`.
pub trait Environment {
    fn observe(&self) -> AugState;
    fn step(&mut self, u: f64) -> Result<Transition>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Evaluator {
    /// Batch least squares over the iteration's tuples.
    BatchLs,
    /// Recursive least squares, restarted at `τ I` each iteration and swept
    /// over the tuples `passes` times.
    Rls { passes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    /// Initial RLS covariance scale.
    pub tau: f64,
    /// Half-width of the uniform exploration noise on `u` (V).
    pub dither: f64,
    /// Convergence threshold on `‖K^{i+1} − K^i‖`.
    pub tol: f64,
    pub max_iter: usize,
    pub tuples_per_iter: usize,
    /// Training aborts if `|x|` exceeds this (A).
    pub safety_bound: f64,
    pub seed: u64,
    pub evaluator: Evaluator,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            tau: 1e6,
            dither: 5.0,
            tol: 1e-4,
            max_iter: 100,
            tuples_per_iter: 6,
            safety_bound: 15.0,
            seed: 0,
            evaluator: Evaluator::BatchLs,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidParams(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.tuples_per_iter < MIN_TUPLES {
            return Err(Error::InvalidParams(format!(
                "tuples_per_iter must be >= {MIN_TUPLES}, got {}",
                self.tuples_per_iter
            )));
        }
        if !(self.tau > 0.0 && self.dither >= 0.0 && self.tol > 0.0 && self.safety_bound > 0.0) {
            return Err(Error::InvalidParams("tau, tol and safety_bound must be > 0, dither >= 0".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidParams("max_iter must be >= 1".into()));
        }
        if let Evaluator::Rls { passes: 0 } = self.evaluator {
            return Err(Error::InvalidParams("RLS evaluator needs at least one pass".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub gain: PolicyGain,
    pub kernel: QKernel,
    /// `‖design·g − targets‖ / (1 + ‖targets‖)` on this iteration's tuples.
    pub bellman_residual: f64,
    /// Tuples used, including any top-up.
    pub tuples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTrainOutcome {
    pub kernel: QKernel,
    pub gain: PolicyGain,
    pub iterations: usize,
    pub history: Vec<IterationRecord>,
}

/// Evaluates the current policy from tuples with the configured solver.
pub fn evaluate_tuples(tuples: &[DataTuple], cfg: &TrainConfig, prior: &QKernel) -> Result<QKernel> {
    let (design, targets) = build_ls_rows(tuples, cfg.gamma)?;
    evaluate_design(&design, &targets, cfg, prior)
}

fn evaluate_design(design: &DMatrix<f64>, targets: &DVector<f64>, cfg: &TrainConfig, prior: &QKernel) -> Result<QKernel> {
    match cfg.evaluator {
        Evaluator::BatchLs => batch_ls_solve(design, targets),
        Evaluator::Rls { passes } => {
            check_rank(&equilibrate(design).0.singular_values())?;
            let mut rls = RlsState::new(prior.to_vec(), cfg.tau);
            for _ in 0..passes {
                for (i, t) in targets.iter().enumerate() {
                    let row = KernelVec::from_fn(|j, _| design[(i, j)]);
                    rls.update(&row, *t);
                }
            }
            Ok(rls.kernel())
        }
    }
}

/// Q-learning policy iteration against a black-box environment.
///
/// Each iteration collects `tuples_per_iter` transitions under
/// `u = −K^i X + dither` (more if the batch is numerically rank deficient),
/// fits `G^{i+1}` to the sampled Bellman identity and takes the greedy gain
/// from it. Stops once the gain moves less than `tol`.
pub fn q_policy_iteration<E: Environment + ?Sized>(
    env: &mut E,
    k0: &PolicyGain,
    weights: &TrackingWeights,
    cfg: &TrainConfig,
) -> Result<QTrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gain = *k0;
    let mut kernel = QKernel::new(Matrix3::zeros());
    let mut history = Vec::new();
    let mut step_index = 0u64;
    for it in 1..=cfg.max_iter {
        let mut tuples = Vec::with_capacity(cfg.tuples_per_iter);
        let cap = cfg.tuples_per_iter * TOP_UP_FACTOR;
        let (fitted, design, targets) = loop {
            let state = env.observe();
            let noise = if cfg.dither > 0.0 {
                rng.random_range(-cfg.dither..=cfg.dither)
            } else {
                0.0
            };
            let tr = env.step(gain.control(&state) + noise)?;
            step_index += 1;
            if !(tr.next[0].abs() <= cfg.safety_bound) {
                return Err(Error::SafetyBound {
                    step: step_index,
                    current: tr.next[0],
                    bound: cfg.safety_bound,
                });
            }
            tuples.push(DataTuple::from_transition(&state, tr.applied_u, &tr.next, &gain, weights)?);
            if tuples.len() < cfg.tuples_per_iter {
                continue;
            }
            let (design, targets) = build_ls_rows(&tuples, cfg.gamma)?;
            match evaluate_design(&design, &targets, cfg, &kernel) {
                Err(Error::RankDeficient { .. }) if tuples.len() < cap => continue,
                result => break (result?, design, targets),
            }
        };
        kernel = fitted;
        let fit = &design * DVector::from_column_slice(kernel.to_vec().as_slice());
        let bellman_residual = (fit - &targets).norm() / (1.0 + targets.norm());
        let next = policy_improvement(&kernel)?;
        let moved = next.distance(&gain);
        gain = next;
        history.push(IterationRecord {
            gain,
            kernel,
            bellman_residual,
            tuples: tuples.len(),
        });
        if moved < cfg.tol {
            return Ok(QTrainOutcome {
                kernel,
                gain,
                iterations: it,
                history,
            });
        }
    }
    Err(Error::NotConverged {
        iterations: cfg.max_iter,
        residual: history.last().map_or(f64::NAN, |h| h.bellman_residual),
    })
}
