//! Closed-form gradient moments against the composite Gauss–Legendre
//! quadrature oracle, plus curve-table invariants.

use qgait_core::theory::{
    compute_curves, expected_grad_mean_sq, expected_grad_sq_norm, quadrature_oracle, Moment,
};

#[test]
fn first_moment_closed_form_examples() {
    assert_eq!(expected_grad_mean_sq(1.0).unwrap(), 1.0);
    assert_eq!(expected_grad_mean_sq(2.0).unwrap(), 0.25);
    assert_eq!(expected_grad_mean_sq(10.0).unwrap(), 0.01);
}

#[test]
fn second_moment_frozen_values() {
    // mpmath, 40 significant digits
    let cases = [
        (1.0, 1.004957180659324797967948924501732800425),
        (2.0, 0.2647926417118524185657521215156458256936),
        (50.0, 0.006666666666666666666671809999594570447421),
    ];
    for (k, expect) in cases {
        let got = expected_grad_sq_norm(k).unwrap();
        assert!(
            (got - expect).abs() < 1e-12,
            "E[‖∇G‖²]({k}) = {got}, expected {expect}"
        );
    }
    // large-k asymptote 1/(3k)
    assert!((expected_grad_sq_norm(50.0).unwrap() - 1.0 / 150.0).abs() < 1e-6);
}

#[test]
fn quadrature_matches_closed_forms_at_k3() {
    let first = quadrature_oracle(3.0, Moment::First).unwrap();
    assert!((first - 1.0 / 9.0).abs() < 1e-10, "FIRST at k=3: {first}");
    let second = quadrature_oracle(3.0, Moment::Second).unwrap();
    let expect = expected_grad_sq_norm(3.0).unwrap();
    assert!((second - expect).abs() < 1e-10, "SECOND at k=3: {second}");
}

#[test]
fn closed_forms_match_quadrature_over_the_k_range() {
    for i in 0..50 {
        let k = 1.0 + 9.0 * i as f64 / 49.0;
        let e2 = expected_grad_mean_sq(k).unwrap();
        let q2 = quadrature_oracle(k, Moment::First).unwrap();
        assert!((e2 - q2).abs() < 1e-8, "first moment mismatch at k={k}");
        let es = expected_grad_sq_norm(k).unwrap();
        let qs = quadrature_oracle(k, Moment::Second).unwrap();
        assert!((es - qs).abs() < 1e-8, "second moment mismatch at k={k}");
    }
}

#[test]
fn moment_bounds_hold() {
    for i in 1..=100 {
        let k = 1.0 + i as f64 * 0.49;
        assert!(expected_grad_mean_sq(k).unwrap() < 1.0, "E²[∇G] at k={k}");
        assert!(expected_grad_sq_norm(k).unwrap() > 0.0, "E[‖∇G‖²] at k={k}");
    }
    assert_eq!(expected_grad_mean_sq(1.0).unwrap(), 1.0);
}

#[test]
fn both_moments_decay_monotonically() {
    let mut prev = (f64::INFINITY, f64::INFINITY);
    for i in 0..=98 {
        let k = 1.0 + 0.5 * i as f64;
        let cur = (
            expected_grad_mean_sq(k).unwrap(),
            expected_grad_sq_norm(k).unwrap(),
        );
        assert!(cur.0 < prev.0, "first moment not decreasing at k={k}");
        assert!(cur.1 < prev.1, "second moment not decreasing at k={k}");
        prev = cur;
    }
}

#[test]
fn curve_table_invariants() {
    let curves = compute_curves(1.0, 10.0, 40).unwrap();
    assert_eq!(curves.points.len(), 40);
    assert_eq!(curves.x.len(), 40);
    assert_eq!(curves.theta.len(), 4);
    for w in curves.points.windows(2) {
        assert!(w[1].first_moment_sq < w[0].first_moment_sq);
    }
    for p in &curves.points {
        assert!(p.second_moment > 0.0);
        assert!(p.first_moment_sq <= 1.0);
    }
}
