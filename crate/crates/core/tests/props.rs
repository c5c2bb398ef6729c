//! Property tests for the contract invariants.

use lscfg::geometry::{pairwise_similarity, ClusterConfig};
use lscfg::kernels::{polar_forward, PolarParams};
use lscfg::losses::distance_penalty;
use lscfg::model::PolarConfig;
use lscfg::tape::Tape;
use lscfg::textures::{augment, generate, TextureClass};
use proptest::prelude::*;

fn reference_clusters() -> ClusterConfig {
    ClusterConfig::circular(5, 0.85, 0.34, 0.79, 0.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pairwise_similarity_is_symmetric_and_bounded(
        a in prop::collection::vec(0.0f64..1.0, 5),
        b in prop::collection::vec(0.0f64..1.0, 5),
    ) {
        let ab = pairwise_similarity(&a, &b);
        let ba = pairwise_similarity(&b, &a);
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn pairwise_similarity_self_is_one(
        a in prop::collection::vec(0.01f64..1.0, 5),
    ) {
        prop_assert!((pairwise_similarity(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pairwise_similarity_is_scale_invariant(
        a in prop::collection::vec(0.0f64..1.0, 5),
        b in prop::collection::vec(0.0f64..1.0, 5),
        scale in 0.01f64..100.0,
    ) {
        let scaled_a: Vec<f64> = a.iter().map(|x| x * scale).collect();
        let scaled_b: Vec<f64> = b.iter().map(|x| x * scale).collect();
        let plain = pairwise_similarity(&a, &b);
        let scaled = pairwise_similarity(&scaled_a, &scaled_b);
        prop_assert!((plain - scaled).abs() < 1e-9, "{} vs {}", plain, scaled);
    }

    #[test]
    fn distance_penalty_is_monotone_and_continuous(
        r_c in 0.1f64..3.0,
        x in 0.0f64..5.0,
        step in 1e-6f64..0.5,
    ) {
        prop_assert!(distance_penalty(x, r_c) >= 0.0);
        prop_assert!(distance_penalty(x + step, r_c) >= distance_penalty(x, r_c));
        // Continuity at the radius.
        let below = distance_penalty(r_c - 1e-9, r_c);
        let above = distance_penalty(r_c + 1e-9, r_c);
        prop_assert!(below == 0.0 && above < 1e-8);
    }

    #[test]
    fn geometric_loss_nonnegative_and_permutation_invariant(
        seed_z in prop::collection::vec(-2.0f64..2.0, 12),
        swap in (0usize..6, 0usize..6),
    ) {
        let cfg = reference_clusters();
        let labels: Vec<usize> = (0..6).map(|i| i % 5).collect();
        let mut tape = Tape::new();
        let zv = tape.leaf(&[6, 2], seed_z.clone()).unwrap();
        let loss = lscfg::losses::geometric_loss(&mut tape, zv, &labels, &cfg).unwrap();
        let value = tape.value(loss)[0];
        prop_assert!(value >= 0.0);

        // Swap two batch rows (with their labels): the sum is unchanged.
        let (i, j) = swap;
        let mut z2 = seed_z.clone();
        let mut labels2 = labels.clone();
        z2.swap(2 * i, 2 * j);
        z2.swap(2 * i + 1, 2 * j + 1);
        labels2.swap(i, j);
        let mut tape2 = Tape::new();
        let zv2 = tape2.leaf(&[6, 2], z2).unwrap();
        let loss2 = lscfg::losses::geometric_loss(&mut tape2, zv2, &labels2, &cfg).unwrap();
        prop_assert!((value - tape2.value(loss2)[0]).abs() < 1e-12);
    }

    #[test]
    fn geometric_loss_zero_iff_all_within_radius(
        offsets in prop::collection::vec((0.0f64..2.0, 0.0f64..std::f64::consts::TAU), 5),
    ) {
        let cfg = reference_clusters();
        let labels: Vec<usize> = (0..5).collect();
        let mut z = Vec::new();
        let mut all_inside = true;
        for (label, (dist, angle)) in labels.iter().zip(&offsets) {
            let c = cfg.center(*label);
            z.push(c[0] + dist * angle.cos());
            z.push(c[1] + dist * angle.sin());
            if *dist > cfg.radius(*label) {
                all_inside = false;
            }
        }
        let mut tape = Tape::new();
        let zv = tape.leaf(&[5, 2], z).unwrap();
        let loss = lscfg::losses::geometric_loss(&mut tape, zv, &labels, &cfg).unwrap();
        let value = tape.value(loss)[0];
        // The offset radius is the exact center distance, so the penalty is
        // zero exactly when every sample sits within its radius.
        if all_inside {
            prop_assert!(value < 1e-12, "inside but loss {}", value);
        } else {
            prop_assert!(value > 0.0, "outside but loss {}", value);
        }
    }

    #[test]
    fn class_similarity_components_lie_in_unit_interval(
        x in -3.0f64..3.0,
        y in -3.0f64..3.0,
    ) {
        let cfg = reference_clusters();
        for v in cfg.class_similarity(&[x, y]) {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn polar_transform_preserves_radius(
        x in -3.0f64..3.0,
        y in -3.0f64..3.0,
    ) {
        let params: PolarParams = PolarConfig::default().params();
        let mut out = [0.0; 2];
        polar_forward(&[x, y], 1, params, &mut out);
        let r_in = x.hypot(y);
        let r_out = out[0].hypot(out[1]);
        prop_assert!((r_in - r_out).abs() < 1e-12);
    }

    #[test]
    fn augmentation_keeps_pixels_in_unit_range(
        class_code in 0usize..5,
        seed in 0u64..10_000,
        aug_seed in 0u64..10_000,
    ) {
        let class = TextureClass::from_code(class_code).unwrap();
        let sample = generate(class, seed, 16).unwrap();
        prop_assert!(sample.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for out in augment(&sample, 0, aug_seed, 0.5) {
            prop_assert!(out.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert_eq!(out.label, class);
        }
    }
}
