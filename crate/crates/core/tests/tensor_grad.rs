mod common;

use common::grad_suite::{check_primitive, PRIMITIVES, TOL_F32, TOL_F64};

#[test]
fn every_primitive_matches_finite_differences() {
    let mut failures = Vec::new();
    for name in PRIMITIVES {
        let (e64, e32) = check_primitive(name);
        if !(e64 < TOL_F64 && e32 < TOL_F32) {
            failures.push(format!("{name}: f64 {e64:.2e}, f32 {e32:.2e}"));
        }
    }
    assert!(failures.is_empty(), "gradient mismatches:\n{}", failures.join("\n"));
}
