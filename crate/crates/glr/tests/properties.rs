//! Property tests for the invariants the rest of the pipeline leans on:
//! depth sampling layout, grouping as a pure reshape, gradient clipping,
//! patch sampling bounds, and metric ranges.

use glr::camera::{sample_depths, DepthPlanes, DepthSampling};
use glr::harness::sample_patch;
use glr::psv::{group_depths, ungroup_depths, ImageBuffer, PlaneSweepVolume, Rect};
use glr::scenes::{psnr, ssim};
use glr::tensor::{clip_global_norm, NamedTensors, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn depth_samples_hit_bounds_and_increase(
        near in 0.05f64..4.0,
        span in 0.1f64..10.0,
        count in 2usize..128,
        disparity in any::<bool>(),
    ) {
        let far = near + span;
        let mode = if disparity { DepthSampling::Disparity } else { DepthSampling::Depth };
        let planes = sample_depths(near, far, count, mode).unwrap();
        prop_assert_eq!(planes.len(), count);
        prop_assert_eq!(planes.distances[0], near);
        prop_assert_eq!(planes.distances[count - 1], far);
        for w in planes.distances.windows(2) {
            prop_assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn grouping_round_trips_bitwise(
        d_over_g in 1usize..4,
        g in 1usize..5,
        v in 1usize..4,
        cin in 3usize..5,
        h in 4usize..10,
        w in 4usize..10,
        seed in any::<u64>(),
    ) {
        let d = d_over_g * g;
        let n = d * v * cin * h * w;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..n).map(|_| rng.random::<f32>()).collect();
        let psv = PlaneSweepVolume {
            data: Tensor::from_vec(&[d, v, cin, h, w], data.clone()).unwrap(),
            depths: DepthPlanes {
                distances: (0..d).map(|i| 1.0 + 0.1 * i as f64).collect(),
                mode: DepthSampling::Depth,
            },
            patch: Rect::full(w, h),
            full_size: (h, w),
        };
        let grouped = group_depths(&psv, g).unwrap();
        prop_assert_eq!(grouped.data.dims(), &[d / g, cin * g * v, h, w]);
        // Grouping is a relabeling of the same buffer.
        prop_assert_eq!(grouped.data.data(), &data[..]);
        let back = ungroup_depths(&grouped).unwrap();
        prop_assert_eq!(back.data.data(), &data[..]);
        prop_assert_eq!(back.data.dims(), psv.data.dims());
    }

    #[test]
    fn clipping_caps_the_global_norm(
        sizes in prop::collection::vec(1usize..40, 1..5),
        max_norm in 0.01f64..10.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut grads = NamedTensors::<f32>::new();
        for (i, n) in sizes.iter().enumerate() {
            let data: Vec<f32> = (0..*n).map(|_| rng.random::<f32>() * 4.0 - 2.0).collect();
            grads.insert(&format!("g{i}"), Tensor::from_vec(&[*n], data).unwrap()).unwrap();
        }
        let before = clip_global_norm(&mut grads, max_norm).unwrap();
        let after: f64 = grads
            .iter()
            .flat_map(|(_, t)| t.data())
            .map(|&v| v as f64 * v as f64)
            .sum::<f64>()
            .sqrt();
        prop_assert!(after <= max_norm + 1e-6, "after {after} > max {max_norm}");
        prop_assert!(after <= before + 1e-6);
        if before <= max_norm {
            // No rescaling below the threshold.
            prop_assert!((after - before).abs() < 1e-9 * before.max(1.0));
        }
    }

    #[test]
    fn sampled_patches_stay_in_frame(
        h4 in 1usize..32,
        w4 in 1usize..32,
        p4 in 1usize..16,
        seed in any::<u64>(),
    ) {
        let (h, w, patch) = (h4 * 4, w4 * 4, p4 * 4);
        prop_assume!(patch <= h.min(w));
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for _ in 0..8 {
            let r = sample_patch(&mut rng, (h, w), patch).unwrap();
            prop_assert_eq!(r.width, patch);
            prop_assert_eq!(r.height, patch);
            prop_assert!(r.y0 + r.height <= h);
            prop_assert!(r.x0 + r.width <= w);
        }
    }

    #[test]
    fn metrics_stay_in_range(
        h in 11usize..24,
        w in 11usize..24,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut random_image = |c: usize| {
            let mut img = ImageBuffer::zeros(c, h, w);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        img.set(ch, y, x, rng.random::<f32>());
                    }
                }
            }
            img
        };
        let a = random_image(3);
        let b = random_image(3);
        let p = psnr(&a, &b).unwrap();
        prop_assert!(p.is_finite() && p <= 99.0);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s), "ssim {s}");
        prop_assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        // PSNR is bitwise symmetric; SSIM only up to rounding, because the
        // cross terms multiply the two means in a fixed order.
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }
}
