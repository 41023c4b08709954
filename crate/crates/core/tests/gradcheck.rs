//! Analytic gradients against central finite differences.

mod common;

use cgm_wide_deep::rng::SplitMix64;
use common::{gradcheck_worst as case, GRAD_MAX_REL_ERR as MAX_REL_ERR};

#[test]
fn tiny_net_matches_finite_differences() {
    let worst = case(1, 8, 4, 9, true, false);
    assert!(worst < MAX_REL_ERR, "max relative error {worst:e}");
}

#[test]
fn single_feature_sequence() {
    let worst = case(2, 5, 3, 1, false, false);
    assert!(worst < MAX_REL_ERR, "max relative error {worst:e}");
}

#[test]
fn sigmoid_wide_branch() {
    let worst = case(3, 4, 2, 9, true, true);
    assert!(worst < MAX_REL_ERR, "max relative error {worst:e}");
}

#[test]
fn randomized_shapes() {
    let mut rng = SplitMix64::new(77);
    for trial in 0..10 {
        let n = 1 + rng.below(16) as usize;
        let hidden = 1 + rng.below(8) as usize;
        let width = if rng.bernoulli(0.5) { 9 } else { 1 };
        let worst = case(1000 + trial, n, hidden, width, rng.bernoulli(0.5), false);
        assert!(worst < MAX_REL_ERR, "trial {trial} (N={n}, H={hidden}): {worst:e}");
    }
}
