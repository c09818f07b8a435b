use splitwire::orchestrator::verify::{reference_config, run_suite, Suite};

#[test]
fn every_suite_passes_on_the_reference_config() {
    let config = reference_config();
    for suite in Suite::ALL {
        let report = run_suite(suite, &config).unwrap();
        for c in &report.checks {
            println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        assert!(report.passed(), "{suite:?} failed");
    }
}
