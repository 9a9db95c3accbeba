mod common;

use common::*;

#[test]
fn dynamics_gradient_matches_finite_differences() {
    let e = dynamics_gradient_error(1);
    assert!(e <= 1e-3, "relative error {e}");
}

#[test]
fn reward_gradient_with_penalty_matches_finite_differences() {
    let e = reward_gradient_error(2);
    assert!(e <= 1e-3, "relative error {e}");
}

#[test]
fn value_gradient_matches_finite_differences() {
    let e = value_gradient_error(3);
    assert!(e <= 1e-3, "relative error {e}");
}

#[test]
fn policy_gradient_matches_finite_differences() {
    let e = policy_gradient_error(4);
    assert!(e <= 1e-3, "relative error {e}");
}

#[test]
fn lambda_return_matches_expansion() {
    let r = lambda_return_oracle(1000, 5);
    assert!(r.max_abs_error <= 1e-6, "max error {}", r.max_abs_error);
    assert!(r.collapse_exact);
}

#[test]
fn gradient_penalty_limits() {
    let (linear, constant) = gradient_penalty_analytics(6);
    assert!(linear <= 1e-6, "linear {linear}");
    assert!(constant <= 1e-6, "constant {constant}");
}

#[test]
fn planner_finds_grid_optimum() {
    let gap = mppi_grid_gap(20);
    assert!(gap <= 0.05, "gap {gap}");
}

#[test]
fn elite_weights_and_shift_invariance() {
    let (w, same) = elite_softmax_check();
    assert_eq!(w.len(), 2);
    assert!(
        (w[0] - 0.731).abs() <= 1e-3 && (w[1] - 0.269).abs() <= 1e-3,
        "{w:?}"
    );
    assert!(same);
}
