mod common;

use common::expected_accuracy;
use duet_core::eval::{sim_csv, simulate_referee, simulate_referee_with, SimParams};
use duet_core::Exec;

fn params(p_i: f64, p_e: f64, rho: f64, q: f64) -> SimParams {
    SimParams {
        p_i,
        p_e,
        correlation: rho,
        judge_quality: q,
        delta_sweep: vec![0.0, 0.05, 0.3, 1.0, f64::INFINITY],
        trials: 40_000,
        seed: 5,
    }
}

#[test]
fn matches_closed_form_across_parameters() {
    let mut worst: f64 = 0.0;
    for (p_i, p_e) in [(0.231, 0.327), (0.6, 0.4), (0.1, 0.9)] {
        for rho in [-0.2, 0.0, 0.3] {
            for q in [0.0, 0.3, 0.5, 0.75, 0.95, 1.0] {
                let p = params(p_i, p_e, rho, q);
                if p.joint().is_err() {
                    continue;
                }
                for row in simulate_referee(&p).unwrap() {
                    let want = expected_accuracy(p_i, p_e, rho, q, row.delta);
                    let sigma = (want * (1.0 - want) / p.trials as f64).sqrt().max(1e-12);
                    let z = (row.accuracy - want).abs() / sigma;
                    assert!(
                        z < 4.5,
                        "p_i={p_i} p_e={p_e} rho={rho} q={q} delta={}: {} vs {want} ({z:.1} sigma)",
                        row.delta,
                        row.accuracy
                    );
                    worst = worst.max(z);
                }
            }
        }
    }
    assert!(worst > 0.0);
}

#[test]
fn parallel_and_sequential_agree_bitwise() {
    let p = SimParams {
        trials: 70_001,
        ..params(0.231, 0.327, 0.1, 0.8)
    };
    assert_eq!(simulate_referee_with(&p, Exec::Sequential).unwrap(), simulate_referee_with(&p, Exec::default()).unwrap());
}

#[test]
fn seed_changes_draws_but_not_format() {
    let a = simulate_referee(&params(0.4, 0.5, 0.0, 0.7)).unwrap();
    let b = simulate_referee(&SimParams {
        seed: 6,
        ..params(0.4, 0.5, 0.0, 0.7)
    })
    .unwrap();
    assert_ne!(a, b);
    assert_eq!(sim_csv(&a).lines().count(), 6);
}

#[test]
fn delta_trades_internal_for_external() {
    // with a mediocre referee, a larger margin moves accuracy toward p_e
    let p = SimParams {
        delta_sweep: vec![0.0, 0.5, 2.0, 10.0, f64::INFINITY],
        trials: 100_000,
        ..params(0.231, 0.327, 0.0, 0.6)
    };
    let rows = simulate_referee(&p).unwrap();
    let last = rows.last().unwrap();
    assert!((last.accuracy - 0.327).abs() < 4.0 * last.std_error);
    assert_eq!(last.gain, last.accuracy - 0.327);
}

#[test]
fn degenerate_arms() {
    for row in simulate_referee(&params(0.0, 0.0, 0.0, 0.9)).unwrap() {
        assert_eq!(row.accuracy, 0.0);
        assert_eq!(row.std_error, 0.0);
    }
    for row in simulate_referee(&params(1.0, 1.0, 0.0, 0.1)).unwrap() {
        assert_eq!(row.accuracy, 1.0);
    }
}
