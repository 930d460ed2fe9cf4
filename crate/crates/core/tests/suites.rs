mod common;

use common::suites::{gradient_suite, hierarchy_suite, isolation_suite, oracle_suite};

fn assert_clean(stats: &[common::suites::CheckStats]) {
    for s in stats {
        assert_eq!(s.failures, 0, "{}: worst {:e}", s.name, s.worst);
    }
}

#[test]
fn gradients_match_finite_differences() {
    assert_clean(&gradient_suite(4));
}

#[test]
fn kernels_match_oracles() {
    assert_clean(&oracle_suite(20));
}

#[test]
fn hierarchy_properties_hold() {
    assert_clean(&hierarchy_suite(40));
}

#[test]
fn finer_heads_stay_isolated_from_coarser_losses() {
    assert_clean(&isolation_suite(6));
}
