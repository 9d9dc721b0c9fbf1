//! Independent references: high-precision grid values and finite-difference
//! gradients for every differentiable primitive and for the full loss.

mod common;

use cmgen::schedule::TimeGrid;
use common::gradients::{self, TOL};

#[test]
fn grid_matches_high_precision_values() {
    let g = TimeGrid::build(0.002, 80.0, 7.0, 10).unwrap();
    for (got, want) in g.boundaries().iter().zip(common::GRID_10) {
        assert!(((got - want) / want).abs() < 1e-12, "{got} vs {want}");
    }
    let g = TimeGrid::build(0.002, 80.0, 7.0, 151).unwrap();
    for (i, want) in common::GRID_151 {
        let got = g.boundaries()[i];
        assert!(((got - want) / want).abs() < 1e-12, "t[{i}] = {got} vs {want}");
    }
}

#[test]
fn primitives_match_finite_differences() {
    for (name, worst) in gradients::primitive_errors(100) {
        assert!(worst < TOL, "{name}: max relative error {worst:e}");
    }
}

#[test]
fn denoiser_gradients_match_finite_differences() {
    let worst = gradients::denoiser_error(100);
    assert!(worst < TOL, "max relative error {worst:e}");
}

#[test]
fn composite_loss_gradients_match_finite_differences() {
    let worst = gradients::loss_error(100);
    assert!(worst < TOL, "max relative error {worst:e}");
}
