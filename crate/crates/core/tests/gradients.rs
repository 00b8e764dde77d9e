mod common;

use common::{grad_cases, grad_check};

#[test]
fn every_loss_gradient_matches_finite_differences() {
    for case in grad_cases() {
        assert!(case.params.len() <= 1000);
        let (frac, worst) = grad_check(&case.params, &case.analytic, 1e-5, 1e-3, &case.objective);
        assert!(frac >= 0.95, "{}: {frac} of coordinates match (worst {worst})", case.name);
        assert!(case.analytic.iter().any(|g| *g != 0.0), "{}: gradient is identically zero", case.name);
    }
}
