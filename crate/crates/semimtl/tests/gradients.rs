use semimtl::gradsuite::{case_names, run_case, run_suite, CaseKind, COMPOSITE_TOLERANCE, OP_TOLERANCE};

#[test]
fn full_suite_passes() {
    let results = run_suite(7).unwrap();
    assert_eq!(results.len(), case_names().len());
    for r in &results {
        let bound = if r.kind == CaseKind::Composite { COMPOSITE_TOLERANCE } else { OP_TOLERANCE };
        assert_eq!(r.tolerance, bound);
        assert!(r.passed(), "{}: relative error {:e}", r.name, r.max_error);
    }
}

#[test]
fn single_case_is_reproducible() {
    let a = run_case("conv2d", 3).unwrap();
    let b = run_case("conv2d", 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.points, 10);
}
