mod common;

use catch_core::metrics::{bleu, meteor_lite, rouge_l};
use common::oracles;

#[test]
fn metrics_match_brute_force_oracles() {
    for seed in 0..4 {
        for (name, d) in oracles::max_deviation(&oracles::fixtures(50, seed)) {
            assert!(d < 1e-9, "{name} deviates by {d:e} (seed {seed})");
        }
    }
}

#[test]
fn hand_fixtures() {
    let b = bleu(&[1, 2, 3], &[1, 2, 3, 4]).unwrap().value;
    assert!((b - (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-12);
    assert_eq!(format!("{b:.4}"), "0.7165");
    assert_eq!(rouge_l(&[1, 2, 3, 4], &[1, 3, 2, 4]).value, 0.75);
    assert_eq!(meteor_lite(&[2, 1], &[1, 2]).value, 0.5);
}

#[test]
fn oracles_agree_on_hand_fixtures() {
    assert!((oracles::bleu(&[1, 2, 3], &[1, 2, 3, 4]) - 0.716_531_310_573_789_2).abs() < 1e-12);
    assert_eq!(oracles::rouge_l(&[1, 2, 3, 4], &[1, 3, 2, 4]), 0.75);
    assert_eq!(oracles::meteor(&[2, 1], &[1, 2]), 0.5);
    assert_eq!(oracles::lcs(&[1, 2, 1, 3], &[2, 1, 3, 1]), 3);
}
