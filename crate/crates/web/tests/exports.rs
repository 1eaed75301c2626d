use dcc_web::demo::{admm_convergence, queue_comparison, v_sweep, MAX_SLOTS};

#[test]
fn light_load_keeps_both_controllers_in_bounds() {
    let c = queue_comparison(2.0, 1.0, 120, 5).unwrap();
    assert_eq!(c.bounded.violations, 0);
    assert_eq!(c.traditional.violations, 0);
    assert_eq!(c.bounded.v, c.traditional.v);
}

#[test]
fn bounded_controller_never_exceeds_v_max() {
    let c = queue_comparison(4.0, 2.0, 30, 1).unwrap();
    assert_eq!(c.bounded.v, c.v_max);
    assert!((c.traditional.v - 2.0 * c.v_max).abs() < 1e-9);
}

#[test]
fn sweep_totals_are_consistent() {
    for p in v_sweep(3, 50, 9).unwrap() {
        let t = &p.totals;
        assert!((t.f_grid + t.f_batt + t.f_tran + t.f_work - t.f_total).abs() < 1e-9);
    }
}

#[test]
fn truncated_runs_are_flagged() {
    let c = admm_convergence(25, 1.0, 3, 2).unwrap();
    assert!(c.iterations <= 3);
    assert_eq!(c.primal.len(), c.iterations);
    if c.truncated {
        assert_eq!(c.iterations, 3);
    }
    assert!(queue_comparison(2.0, 1.0, MAX_SLOTS + 1, 1).is_err());
}
