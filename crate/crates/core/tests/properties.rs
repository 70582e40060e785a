//! Property tests for the small algebraic invariants.

use flipad::anomaly::pick_threshold;
use flipad::baselines::{log_dct_features, DctConfig};
use flipad::lasso::soft_threshold;
use flipad::tensor::Tensor;
use proptest::prelude::*;

proptest! {
    /// TNSR serialization is bit-exact for any finite payload and shape.
    #[test]
    fn tnsr_round_trip_is_bitwise(
        data in proptest::collection::vec(-1e12f64..1e12, 1..64),
        split in 1usize..7,
    ) {
        let n = data.len();
        let rows = split.min(n);
        let shape = if n % rows == 0 { vec![rows, n / rows] } else { vec![n] };
        let t = Tensor::new(shape, data).unwrap();
        let mut buf = Vec::new();
        t.write_tnsr(&mut buf).unwrap();
        let back = Tensor::read_tnsr(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(t.shape(), back.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    /// Soft-thresholding shrinks toward zero, never past it, and never
    /// flips sign.
    #[test]
    fn soft_threshold_shrinks(
        v in proptest::collection::vec(-1e6f64..1e6, 1..32),
        theta in 0.0f64..1e3,
    ) {
        let t = Tensor::from_vec(v.clone());
        let s = soft_threshold(&t, theta);
        for (&orig, &out) in v.iter().zip(s.data()) {
            prop_assert!(out.abs() <= orig.abs());
            prop_assert!(out * orig >= 0.0);
            prop_assert!((orig.abs() - out.abs()) <= theta + orig.abs() * 1e-12);
            if orig.abs() <= theta {
                prop_assert_eq!(out, 0.0);
            }
        }
    }

    /// Frequency features stay finite for any finite image.
    #[test]
    fn log_dct_is_finite(
        data in proptest::collection::vec(-1e8f64..1e8, 16..=16),
    ) {
        let img = Tensor::new(vec![1, 4, 4], data).unwrap();
        let feats = log_dct_features(&img, &DctConfig::default()).unwrap();
        prop_assert!(feats.all_finite());
    }

    /// The calibrated threshold rejects at most a `fnr` fraction of the
    /// scores it was calibrated on.
    #[test]
    fn threshold_bounds_rejections(
        scores in proptest::collection::vec(0.0f64..1e6, 1..200),
        fnr in 0.0f64..0.5,
    ) {
        let tau = pick_threshold(&scores, fnr).unwrap();
        let rejected = scores.iter().filter(|&&s| s > tau).count();
        prop_assert!(rejected as f64 <= fnr * scores.len() as f64);
    }
}
