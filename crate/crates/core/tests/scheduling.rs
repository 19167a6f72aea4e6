//! Bilinear scheduling over the Q-core table, checked against an
//! independent cell search and a per-entry coefficient solve.

use nalgebra::{Matrix3, Matrix4, Vector4};
use proptest::prelude::*;
use qsched_core::qlearn::QKernel;
use qsched_core::scheduler::QCoreTable;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PITCH: f64 = 45.0;

fn random_kernel(rng: &mut impl Rng) -> QKernel {
    let l = Matrix3::from_fn(|_, _| rng.random_range(-3.0..3.0));
    QKernel::new(l * l.transpose() + Matrix3::identity() * rng.random_range(0.1..2.0))
}

fn random_grid(rng: &mut impl Rng, n: usize, lo: f64, span: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| lo + rng.random_range(0.0..span)).collect();
    v.sort_by(f64::total_cmp);
    v.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
    v
}

fn random_table(rng: &mut impl Rng) -> QCoreTable {
    let nt = rng.random_range(1..=8);
    let nc = rng.random_range(1..=6);
    let offset = rng.random_range(0.0..5.0);
    let theta = random_grid(rng, nt, offset, PITCH - 5.0);
    let current = random_grid(rng, nc, 0.0, 7.0);
    let cores = (0..theta.len() * current.len()).map(|_| random_kernel(rng)).collect();
    QCoreTable::new(theta, current, PITCH, 0.9, "t".into(), cores).unwrap()
}

/// `(index, coordinate)` of a bracketing node.
type Node = (usize, f64);

/// Bracketing nodes and coordinates of the point, found by brute force.
/// Angles are unrolled so the upper node can sit one pitch past the first.
fn oracle_cell(t: &QCoreTable, theta: f64, i: f64) -> (Node, Node, f64, Node, Node, f64) {
    let th = t.theta_nodes();
    let cu = t.current_nodes();
    let mut x = theta;
    while x < th[0] {
        x += PITCH;
    }
    while x >= th[0] + PITCH {
        x -= PITCH;
    }
    let mut col = 0;
    for (j, &node) in th.iter().enumerate() {
        if node <= x {
            col = j;
        }
    }
    let (c0, c1) = if th.len() == 1 {
        ((0, th[0]), (0, th[0] + PITCH))
    } else if col + 1 < th.len() {
        ((col, th[col]), (col + 1, th[col + 1]))
    } else {
        ((col, th[col]), (0, th[0] + PITCH))
    };
    let y = i.max(cu[0]).min(cu[cu.len() - 1]);
    let mut row = 0;
    for (j, &node) in cu.iter().enumerate() {
        if node <= y {
            row = j;
        }
    }
    let (r0, r1) = if row + 1 < cu.len() {
        ((row, cu[row]), (row + 1, cu[row + 1]))
    } else if cu.len() > 1 {
        ((row - 1, cu[row - 1]), (row, cu[row]))
    } else {
        ((0, cu[0]), (0, cu[0] + 1.0))
    };
    (c0, c1, x, r0, r1, y)
}

/// Fits `a + b·θ + c·i + d·θ·i` through the four corners, entry by entry,
/// and evaluates it at the point.
fn coefficient_solve(t: &QCoreTable, theta: f64, i: f64) -> Matrix3<f64> {
    let (c0, c1, x, r0, r1, y) = oracle_cell(t, theta, i);
    let pts = [(c0, r0), (c1, r0), (c0, r1), (c1, r1)];
    let m = Matrix4::from_fn(|k, j| {
        let ((_, tx), (_, iy)) = pts[k];
        [1.0, tx, iy, tx * iy][j]
    });
    let lu = m.lu();
    Matrix3::from_fn(|a, b| {
        let rhs = Vector4::from_fn(|k, _| {
            let ((cc, _), (rr, _)) = pts[k];
            t.core(rr, cc).g[(a, b)]
        });
        let coef = lu.solve(&rhs).expect("corner system is regular");
        coef[0] + coef[1] * x + coef[2] * y + coef[3] * x * y
    })
}

#[test]
fn blend_matches_coefficient_solve_on_random_tables() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for _ in 0..1000 {
        let t = random_table(&mut rng);
        let theta = rng.random_range(-PITCH..2.0 * PITCH);
        let i = rng.random_range(-1.0..9.0);
        let got = t.scheduled_q(theta, i).g;
        let want = coefficient_solve(&t, theta, i);
        let scale = want.abs().max().max(1.0);
        let err = (got - want).abs().max();
        assert!(err <= 1e-10 * scale, "theta {theta}, i {i}: err {err:e}");
    }
}

#[test]
fn corners_are_reproduced_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let t = random_table(&mut rng);
        for (r, &i) in t.current_nodes().iter().enumerate() {
            for (c, &th) in t.theta_nodes().iter().enumerate() {
                let got = t.scheduled_q(th, i).g;
                let err = (got - t.core(r, c).g).abs().max();
                assert!(err <= 1e-12 * t.core(r, c).g.abs().max(), "node ({r}, {c}) err {err:e}");
                let again = t.scheduled_q(th + PITCH, i).g;
                assert!((again - got).abs().max() <= 1e-12 * got.abs().max());
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn blend_is_convex_and_symmetric(seed in any::<u64>(), theta in -90.0f64..90.0, i in -2.0f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_table(&mut rng);
        let loc = t.locate(theta, i);
        prop_assert!((0.0..1.0).contains(&loc.l1) && (0.0..=1.0).contains(&loc.l2));
        let g = t.blend(&loc).g;
        let corners = t.corners(&loc).map(|(r, c)| t.core(r, c).g);
        for a in 0..3 {
            for b in 0..3 {
                let lo = corners.iter().map(|m| m[(a, b)]).fold(f64::INFINITY, f64::min);
                let hi = corners.iter().map(|m| m[(a, b)]).fold(f64::NEG_INFINITY, f64::max);
                let tol = 1e-12 * (lo.abs() + hi.abs() + 1.0);
                prop_assert!(g[(a, b)] >= lo - tol && g[(a, b)] <= hi + tol);
                prop_assert_eq!(g[(a, b)], g[(b, a)]);
            }
        }
        // blends of positive definite corners stay positive definite, so the
        // scheduled gain never falls back
        prop_assert!(t.scheduled_q(theta, i).g_uu() > 0.0);
        prop_assert!(!t.schedule(theta, i).fell_back);
    }

    #[test]
    fn schedule_is_periodic_in_angle(seed in any::<u64>(), theta in 0.0f64..45.0, i in 0.0f64..8.0, turns in -3i32..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_table(&mut rng);
        let a = t.scheduled_q(theta, i).g;
        let b = t.scheduled_q(theta + f64::from(turns) * PITCH, i).g;
        prop_assert!((a - b).abs().max() <= 1e-9 * a.abs().max());
    }

    #[test]
    fn schedule_is_lipschitz(seed in any::<u64>(), theta in 0.0f64..45.0, i in 0.0f64..7.0, d in -1e-3f64..1e-3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_table(&mut rng);
        // steepest possible slope: largest corner difference over the
        // narrowest cell width, per axis
        let spread = t.cores().iter().map(|c| c.g.abs().max()).fold(0.0, f64::max) * 2.0;
        let min_gap = |v: &[f64], wrap: Option<f64>| {
            let mut gaps: Vec<f64> = v.windows(2).map(|w| w[1] - w[0]).collect();
            if let Some(p) = wrap {
                gaps.push(v[0] + p - v[v.len() - 1]);
            }
            gaps.into_iter().fold(f64::INFINITY, f64::min)
        };
        let lt = spread / min_gap(t.theta_nodes(), Some(PITCH));
        let li = spread / min_gap(t.current_nodes(), None);
        let a = t.scheduled_q(theta, i).g;
        let b = t.scheduled_q(theta + d, i).g;
        let c = t.scheduled_q(theta, i + d).g;
        prop_assert!((a - b).abs().max() <= lt * d.abs() * (1.0 + 1e-9) + 1e-12);
        prop_assert!((a - c).abs().max() <= li * d.abs() * (1.0 + 1e-9) + 1e-12);
    }
}

#[test]
fn nearest_core_is_a_corner_of_the_cell() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..500 {
        let t = random_table(&mut rng);
        let theta = rng.random_range(0.0..PITCH);
        let i = rng.random_range(0.0..8.0);
        let loc = t.locate(theta, i);
        let nearest = t.nearest_index(&loc);
        assert!(t.corners(&loc).contains(&nearest));
        assert_eq!(t.nearest_core(theta, i), t.core(nearest.0, nearest.1));
    }
}
