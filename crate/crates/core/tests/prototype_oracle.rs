//! Masked average pooling against nested loops, and the containment of
//! the strict mask in the dilated one.

mod common;

use catnet::prototype::{double_threshold, ProtoConfig};
use catnet::tensor::Tensor;
use proptest::prelude::*;

#[test]
fn pooling_matches_brute_force() {
    let s = common::pooling_sweep(1200, 77);
    assert!(s.single_pixel_planes > 0 && s.full_planes > 0);
    assert!(s.worst <= 1e-5, "pooling differs from loops by {}", s.worst);
}

#[test]
fn strict_mask_never_leaves_dilated_mask() {
    assert_eq!(common::containment_violations(2000, 5), 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn strict_mask_is_inside_dilated_mask(
        probs in proptest::collection::vec(0.0f64..=1.0, 1..200),
        tau in 0.05f64..0.95,
        gap in 0.0f64..0.5,
    ) {
        let cfg = ProtoConfig { tau, tau_hat: (tau - gap).max(0.0), ..ProtoConfig::default() };
        let n = probs.len();
        let pair = double_threshold(&Tensor::new(&[1, n], probs.clone()).unwrap(), &cfg).unwrap();
        for i in 0..n {
            prop_assert!(pair.mask.data()[i] <= pair.dilated.data()[i]);
            prop_assert_eq!(pair.mask.data()[i] == 1.0, probs[i] > tau);
        }
    }
}

#[test]
fn threshold_boundaries_are_strict() {
    let cfg = ProtoConfig::default();
    let p = Tensor::new(&[1, 5], vec![0.4, 0.4000001, 0.5, 0.5000001, 1.0]).unwrap();
    let pair = double_threshold(&p, &cfg).unwrap();
    assert_eq!(pair.mask.data(), &[0.0, 0.0, 0.0, 1.0, 1.0]);
    assert_eq!(pair.dilated.data(), &[0.0, 1.0, 1.0, 1.0, 1.0]);
}
