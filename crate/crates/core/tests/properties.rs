use approx::assert_abs_diff_eq;
use latmark::attacker::FailureMemory;
use latmark::attacks::{self, map_params, AttackAction, AttackContext, AttackRegistry};
use latmark::codec::{hard_decode, orthonormalize, target_projections, ProjectionTargets};
use latmark::eval::{bra, psnr, ssim};
use latmark::extractor::{ber, calibrate_threshold, is_fake};
use latmark::{Image, LatentFeature, Message};
use proptest::prelude::*;

fn bits(max: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..2, 1..max)
}

fn image(res: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0f64..=1.0, 3 * res * res).prop_map(move |d| Image::from_data(res, res, d).unwrap())
}

proptest! {
    #[test]
    fn latent_features_live_on_the_sphere(v in prop::collection::vec(-10.0f64..10.0, 2..64)) {
        prop_assume!(v.iter().map(|x| x * x).sum::<f64>() > 1e-6);
        let f = LatentFeature::from_unnormalized(&v).unwrap();
        let n: f64 = f.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hex_round_trip(b in bits(130)) {
        let m = Message::new(b.clone()).unwrap();
        let back = Message::from_hex(&m.to_hex(), b.len()).unwrap();
        prop_assert_eq!(back.bits, b);
    }

    #[test]
    fn target_projections_decode_to_the_message(b in bits(70), xi in 0.05f64..1.0) {
        let t = ProjectionTargets::new(xi, -xi).unwrap();
        let m = Message::new(b).unwrap();
        prop_assert_eq!(hard_decode(&target_projections(&m, &t), &t).bits, m.bits);
    }

    #[test]
    fn orthonormalised_rows_are_orthonormal(raw in prop::collection::vec(-1.0f64..1.0, 4 * 12), seed in any::<u64>()) {
        let (d, _) = orthonormalize(&raw, 4, 12, seed).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = (0..12).map(|k| d[i * 12 + k] * d[j * 12 + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((dot - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ber_and_bra_are_complementary(pair in (1usize..40).prop_flat_map(|n| (prop::collection::vec(0u8..2, n), prop::collection::vec(0u8..2, n)))) {
        let (a, b) = (Message::new(pair.0).unwrap(), Message::new(pair.1).unwrap());
        let e = ber(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        prop_assert_eq!(e, ber(&b, &a).unwrap());
        assert_abs_diff_eq!(bra(&a, &b).unwrap(), 1.0 - e, epsilon = 1e-15);
    }

    #[test]
    fn parameter_map_stays_in_range_and_is_monotone(t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
        for spec in &AttackRegistry::default_registry().specs {
            let (lo, hi) = (spec.param_min.min(spec.param_max), spec.param_min.max(spec.param_max));
            let (p1, p2) = (map_params(spec, t1), map_params(spec, t2));
            prop_assert!(p1 >= lo - 1e-12 && p1 <= hi + 1e-12);
            if t1 <= t2 {
                prop_assert!((p2 - p1) * (spec.param_max - spec.param_min) >= -1e-12);
            }
        }
    }

    #[test]
    fn memory_never_exceeds_capacity(cap in 1usize..20, bers in prop::collection::vec(0.0f64..1.0, 0..200)) {
        let mut m = FailureMemory::new(cap);
        for (i, &b) in bers.iter().enumerate() {
            let f = LatentFeature::from_unnormalized(&[1.0, i as f64, 0.5]).unwrap();
            let stored = m.update(&f, b, 0.5);
            prop_assert_eq!(stored, b > 0.5);
            prop_assert!(m.len() <= cap);
        }
    }

    #[test]
    fn verdict_is_monotone_in_ber(b1 in 0.0f64..=1.0, b2 in 0.0f64..=1.0, lambda in 0.0f64..=1.0) {
        if b1 <= b2 && is_fake(b1, lambda) {
            prop_assert!(is_fake(b2, lambda));
        }
    }

    #[test]
    fn calibration_separates_separable_scores(
        benign in prop::collection::vec(0.0f64..0.3, 1..20),
        malicious in prop::collection::vec(0.5f64..1.0, 1..20),
    ) {
        let lam = calibrate_threshold(&benign, &malicious).unwrap();
        prop_assert!(benign.iter().all(|&b| !is_fake(b, lam)));
        prop_assert!(malicious.iter().all(|&b| is_fake(b, lam)));
    }

    #[test]
    fn image_metrics_behave(a in image(12), b in image(12)) {
        prop_assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        assert_abs_diff_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap(), epsilon = 1e-12);
        prop_assert!(ssim(&a, &b).unwrap() <= 1.0 + 1e-12);
        assert_abs_diff_eq!(ssim(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn attacks_keep_pixels_in_range(img in image(16), donor in image(16), sel in prop::collection::vec(0u8..2, 8), tau in prop::collection::vec(0.0f64..=1.0, 8), seed in any::<u64>()) {
        let reg = AttackRegistry::default_registry();
        let ctx = AttackContext { seed, donor: Some(&donor) };
        let out = attacks::apply(&img, &AttackAction::fixed(sel, tau), &reg, &ctx).unwrap();
        prop_assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let none = attacks::apply(&img, &AttackAction::none(reg.len()), &reg, &ctx).unwrap();
        prop_assert_eq!(none.data, img.data);
    }
}
