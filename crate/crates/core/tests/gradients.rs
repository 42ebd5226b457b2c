//! Finite-difference verification of every layer over several seeds.

use normshift_core::gradsuite::{run_layer_gradient_suite, SUITE_THRESHOLD};

#[test]
fn every_layer_passes_gradient_checks_over_five_seeds() {
    let checks = run_layer_gradient_suite(&[11, 22, 33, 44, 55]).unwrap();
    let expected =
        ["conv", "fc", "pool", "relu", "softmax_ce", "bn", "in", "ln", "gn", "sn", "as", "ar", "asr"];
    assert_eq!(checks.len(), expected.len());
    for (check, name) in checks.iter().zip(expected) {
        assert_eq!(check.name, name);
        assert!(
            check.max_err < SUITE_THRESHOLD,
            "{}: max relative error {} >= {SUITE_THRESHOLD}",
            check.name,
            check.max_err
        );
    }
}
