//! Offline table training, persistence and online refinement.

use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use qsched_core::gain::TrackingWeights;
use qsched_core::lqt;
use qsched_core::plant::{default_surface, InductanceSurface, MotorParams};
use qsched_core::qlearn::{DataTuple, Evaluator, QKernel};
use qsched_core::scheduler::{load_table, save_table, train_table, QCoreTable, TableGrid, TableTraining};

fn oracle_gain(params: &MotorParams, inductance: f64) -> [f64; 2] {
    let model = lqt::frozen_model(params, inductance, &TrackingWeights::default(), 0.9).unwrap();
    let p = lqt::are_fixed_point(&model, lqt::DEFAULT_ARE_TOL, lqt::DEFAULT_ARE_MAX_ITER).unwrap();
    let k = lqt::optimal_gain(&p, &model).unwrap();
    [k.k_x(), k.k_r()]
}

#[test]
fn default_table_matches_riccati_everywhere() {
    let params = MotorParams::default();
    let surface = default_surface(&params).unwrap();
    let (table, report) = train_table(&params, &surface, &TrackingWeights::default(), &TableTraining::default()).unwrap();
    assert_eq!((table.rows(), table.cols()), (8, 16));
    assert_eq!(report.cores.len(), 128);
    assert!(report.max_oracle_gap() < 0.01, "gap {}", report.max_oracle_gap());
    for c in &report.cores {
        let [kx, kr] = oracle_gain(&params, c.inductance_h);
        assert!((c.oracle_gain[0] - kx).abs() < 1e-9 * kx && (c.oracle_gain[1] - kr).abs() < 1e-9 * kr.abs());
        assert_eq!(*table.gain(c.row, c.col), qsched_core::PolicyGain::new(c.gain[0], c.gain[1]).unwrap());
    }
    // aligned, zero-current node sits at the aligned inductance
    let aligned = &report.cores[0];
    assert_eq!((aligned.row, aligned.col), (0, 0));
    assert!((aligned.inductance_h - 16e-3).abs() < 1e-15);
    assert!((aligned.gain[0] - 120.0).abs() < 0.15 * 120.0);
    assert!((aligned.gain[1] + 122.0).abs() < 0.15 * 122.0);
}

#[test]
fn recursive_evaluator_trains_the_default_table() {
    // RLS from τ = 1e6 carries a ridge toward the previous kernel, so it
    // needs more tuples per iteration than the exact batch solve
    let params = MotorParams::default();
    let surface = default_surface(&params).unwrap();
    let base = TableTraining::default();
    let training = TableTraining {
        learner: qsched_core::TrainConfig {
            evaluator: Evaluator::Rls { passes: 10 },
            tuples_per_iter: 24,
            ..base.learner
        },
        ..base
    };
    let (_, report) = train_table(&params, &surface, &TrackingWeights::default(), &training).unwrap();
    assert!(report.max_oracle_gap() < 1e-3, "gap {}", report.max_oracle_gap());
}

#[test]
fn training_is_deterministic() {
    let params = MotorParams::default();
    let surface = default_surface(&params).unwrap();
    let training = TableTraining {
        grid: TableGrid {
            theta_nodes: 4,
            current_nodes: 3,
            current_max: 7.0,
        },
        ..TableTraining::default()
    };
    let w = TrackingWeights::default();
    let (a, _) = train_table(&params, &surface, &w, &training).unwrap();
    let (b, _) = train_table(&params, &surface, &w, &training).unwrap();
    assert_eq!(a.to_text(), b.to_text());
    let other_seed = TableTraining {
        learner: qsched_core::TrainConfig {
            seed: 1,
            ..training.learner
        },
        ..training
    };
    let (c, _) = train_table(&params, &surface, &w, &other_seed).unwrap();
    assert_ne!(a.to_text(), c.to_text());
}

#[test]
fn single_core_on_constant_surface_equals_oracle() {
    let params = MotorParams::default();
    let l = 10e-3;
    let surface = InductanceSurface::new(vec![0.0, 45.0], vec![0.0, 10.0], vec![vec![l, l], vec![l, l]]).unwrap();
    let training = TableTraining {
        grid: TableGrid {
            theta_nodes: 1,
            current_nodes: 1,
            current_max: 0.0,
        },
        ..TableTraining::default()
    };
    let (table, report) = train_table(&params, &surface, &TrackingWeights::default(), &training).unwrap();
    assert_eq!((table.rows(), table.cols()), (1, 1));
    let [kx, kr] = oracle_gain(&params, l);
    let g = table.gain(0, 0);
    assert!((g.k_x() - kx).abs() < 1e-6 * kx, "{} vs {kx}", g.k_x());
    assert!((g.k_r() - kr).abs() < 1e-6 * kr.abs());
    assert_eq!(report.cores[0].inductance_h, l);
    // every point of a one-core table schedules to that core
    assert_eq!(table.scheduled_q(17.0, 3.0), *table.core(0, 0));
}

#[test]
fn save_and_load_round_trip_on_disk() {
    let params = MotorParams::default();
    let surface = default_surface(&params).unwrap();
    let (table, _) = train_table(&params, &surface, &TrackingWeights::default(), &TableTraining::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("table.qtab");
    save_table(&table, &path).unwrap();
    let back = load_table(&path).unwrap();
    assert_eq!(back, table);
    assert_eq!(back.motor_fingerprint(), params.fingerprint());
    let path2 = dir.path().join("again.qtab");
    save_table(&back, &path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    assert!(load_table(&dir.path().join("missing.qtab")).is_err());
    std::fs::write(&path, "qsched-table 1\nmotor x\n").unwrap();
    assert!(load_table(&path).is_err());
}

fn spd_kernel() -> impl Strategy<Value = QKernel> {
    (prop::array::uniform9(-3.0f64..3.0), 0.01f64..2.0).prop_map(|(v, d)| {
        let l = Matrix3::from_row_slice(&v);
        QKernel::new(l * l.transpose() + Matrix3::identity() * d)
    })
}

fn small_table() -> impl Strategy<Value = QCoreTable> {
    (1usize..5, 1usize..4)
        .prop_flat_map(|(nt, nc)| (Just(nt), Just(nc), prop::collection::vec(spd_kernel(), nt * nc)))
        .prop_map(|(nt, nc, cores)| {
            let theta = (0..nt).map(|j| 45.0 * j as f64 / nt as f64).collect();
            let current = (0..nc).map(|j| 1.5 * j as f64).collect();
            QCoreTable::new(theta, current, 45.0, 0.9, "abc123".into(), cores).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn text_format_round_trips(table in small_table()) {
        let text = table.to_text();
        let back = QCoreTable::from_text(&text).unwrap();
        prop_assert_eq!(&back, &table);
        prop_assert_eq!(back.to_text(), text);
    }

    #[test]
    fn online_update_respects_gain_clamp(
        table in small_table(),
        m in (0.0f64..7.0, 0.0f64..7.0, -100.0f64..100.0),
        n in (0.0f64..7.0, -100.0f64..100.0),
        cost in 0.0f64..5000.0,
        theta in 0.0f64..45.0,
        i in 0.0f64..5.0,
    ) {
        let mut table = table;
        let tuple = DataTuple::new(Vector3::new(m.0, m.1, m.2), Vector3::new(n.0, m.1, n.1), cost).unwrap();
        let (row, col) = table.nearest_index(&table.locate(theta, i));
        let before = *table.gain(row, col);
        let others: Vec<_> = table.cores().to_vec();
        let upd = table.update_core_online(&tuple, theta, i);
        prop_assert_eq!((upd.row, upd.col), (row, col));
        let after = *table.gain(row, col);
        prop_assert!(after.distance(&before) <= 0.05 * before.norm().max(1e-9) * (1.0 + 1e-12));
        prop_assert!(table.core(row, col).g_uu() > 0.0);
        for (k, c) in table.cores().iter().enumerate() {
            if k != row * table.cols() + col {
                prop_assert_eq!(c, &others[k]);
            }
        }
    }
}
