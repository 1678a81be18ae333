use taskvec::verify::{run_suite, Suite};

fn assert_suite(suite: Suite) {
    let reports = run_suite(suite, 0).unwrap();
    assert!(!reports.is_empty());
    for r in &reports {
        println!(
            "{:<40} n={:<4} worst={:<12.3e} tol={:<9.1e} {:?} {}",
            r.check,
            r.instances,
            r.max_residual,
            r.tolerance,
            r.bound,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    let failed: Vec<_> = reports.iter().filter(|r| !r.pass).map(|r| r.check.as_str()).collect();
    assert!(failed.is_empty(), "failed checks: {failed:?}");
}

#[test]
fn theorem1() {
    assert_suite(Suite::Theorem1);
}

#[test]
fn jensen() {
    assert_suite(Suite::Jensen);
}

#[test]
fn gradients() {
    assert_suite(Suite::Gradients);
}

#[test]
fn fisher() {
    assert_suite(Suite::Fisher);
}

#[test]
fn kl() {
    assert_suite(Suite::Kl);
}

#[test]
fn o1() {
    assert_suite(Suite::O1);
}

#[test]
fn omega_forms() {
    assert_suite(Suite::OmegaForms);
}

#[test]
fn masking() {
    assert_suite(Suite::Masking);
}

#[test]
fn determinism() {
    assert_suite(Suite::Determinism);
}

#[test]
fn linearity() {
    assert_suite(Suite::Linearity);
}

#[test]
fn accumulation() {
    assert_suite(Suite::Accumulation);
}
