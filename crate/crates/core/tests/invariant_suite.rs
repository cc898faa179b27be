use dmps::harness::verify::check_names;
use dmps::harness::{run_invariant_suite, Fault};

#[test]
fn clean_build_passes_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_invariant_suite(Fault::None, &dir.path().join("scratch"));
    for c in &report.checks {
        println!("{}/{}: {} ({})", c.module, c.name, if c.passed { "pass" } else { "FAIL" }, c.detail);
    }
    assert!(report.passed, "{} checks failed", report.failed);
    let listed: Vec<String> = report.checks.iter().map(|c| format!("{}/{}", c.module, c.name)).collect();
    assert_eq!(listed, check_names());
}

#[test]
fn unnormalized_weights_are_caught_and_named() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_invariant_suite(Fault::UnnormalizedWeights, &dir.path().join("scratch"));
    assert!(!report.passed);
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    assert!(failed.contains(&"weights-row-stochastic"), "failed: {failed:?}");
    assert_eq!(report.total, check_names().len());
}
