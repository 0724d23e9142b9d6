use actplan_seqpar::run_verify;

#[test]
fn verify_suite_passes_for_default_seed() {
    let report = run_verify(42);
    for c in &report.checks {
        println!("{} passed={} cases={} max_error={:e} detail={}", c.name, c.passed, c.cases, c.max_error, c.detail);
    }
    assert!(report.passed);
    assert_eq!(report, run_verify(42));
}
