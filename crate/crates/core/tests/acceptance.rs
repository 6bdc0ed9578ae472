//! The release gate: every criterion of the self-check suite must pass.
//!
//! Each test prints its criterion's verdict line (run with
//! `--nocapture` to see the measured values on success) and asserts the
//! verdict. Runtime budgets are enforced inside the criteria themselves,
//! so a pathologically slow build fails rather than silently crawling.

use soldfl_core::acceptance::{self, CriterionReport};

fn assert_criterion(report: CriterionReport) {
    println!("{}", report.line());
    assert!(report.passed, "{}", report.line());
}

#[test]
fn criterion_01_collision_closed_form_matches_monte_carlo() {
    assert_criterion(acceptance::check_collision_oracle());
}

#[test]
fn criterion_02_fresh_projections_are_near_orthogonal() {
    assert_criterion(acceptance::check_fresh_projection_orthogonality());
}

#[test]
fn criterion_03_updated_adapters_stay_near_orthogonal() {
    assert_criterion(acceptance::check_updated_adapter_orthogonality());
}

#[test]
fn criterion_04_aggregation_gap_bound_holds_every_round() {
    assert_criterion(acceptance::check_aggregation_gap_bound());
}

#[test]
fn criterion_05_power_control_meets_delay_target_exactly() {
    assert_criterion(acceptance::check_power_delay_round_trip());
}

#[test]
fn criterion_06_cluster_plans_respect_their_caps() {
    assert_criterion(acceptance::check_cluster_plan_validity());
}

#[test]
fn criterion_07_payload_accounting_is_exact() {
    assert_criterion(acceptance::check_payload_accounting());
}

#[test]
fn criterion_08_methods_order_as_designed() {
    assert_criterion(acceptance::check_method_ordering());
}

#[test]
fn criterion_09_gradients_match_finite_differences() {
    assert_criterion(acceptance::check_gradient_correctness());
}

#[test]
fn criterion_10_entropy_allocation_is_complementary_and_bounded() {
    assert_criterion(acceptance::check_entropy_allocation());
}

#[test]
fn criterion_11_reruns_are_byte_identical() {
    assert_criterion(acceptance::check_determinism());
}
