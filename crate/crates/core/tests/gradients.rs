mod common;

#[test]
fn every_op_matches_finite_differences() {
    for c in common::op_gradient_checks() {
        let tol = if c.smooth { 1e-6 } else { 1e-4 };
        assert!(c.report.checked > 0, "{}", c.name);
        assert!(c.report.max_rel_error < tol, "{}: {:?}", c.name, c.report);
    }
}

#[test]
fn three_block_transformer_matches_finite_differences() {
    let r = common::transformer_gradient_check(1e-4);
    assert!(r.checked > 10_000, "{r:?}");
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}
