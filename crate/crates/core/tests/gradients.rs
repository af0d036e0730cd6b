use std::time::Instant;

use wch_core::grad_suite::{run_suite, CaseKind, DEFAULT_INSTANCES};

#[test]
fn every_case_matches_finite_differences() {
    let start = Instant::now();
    let results = run_suite(None, DEFAULT_INSTANCES, 7).unwrap();
    for r in &results {
        println!(
            "{:<16} {:<22} {:?} max_rel_error {:.3e} (bound {:.0e})",
            r.module, r.name, r.kind, r.max_rel_error, r.tolerance
        );
    }
    let failed: Vec<_> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{}/{}", r.module, r.name))
        .collect();
    assert!(failed.is_empty(), "failing cases: {failed:?}");
    assert!(results.iter().filter(|r| r.kind == CaseKind::Primitive).count() >= 20);
    assert!(start.elapsed().as_secs() < 120, "suite took {:?}", start.elapsed());
}
