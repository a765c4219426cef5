//! Acceptance suite: one test per shipping criterion, each printing a single
//! pass/fail line (visible with `cargo test --test acceptance -- --nocapture`).
//! These are end-to-end checks; the fast unit coverage lives next to each
//! module.

use std::path::Path;
use std::time::{Duration, Instant};

use glr::camera::{normalize_to_target, sample_depths, Camera, DepthSampling};
use glr::convglr::{
    forward, global_latent_render, grouped_input, init_weights, multi_view_matching,
    specialize_weights, upsample_head, ConvGlr, ModelConfig, Variant,
};
use glr::harness::{lr_schedule, render_view, train, LossSchedule, TrainConfig};
use glr::psv::{build_psv, cross_view_variance, mean_psv, ImageBuffer, Rect};
use glr::scenes::{generate_scene, load_scene, psnr, render_ground_truth, save_scene, ssim, Scene};
use glr::selftest::{epipolar_suite, homography_suite};
use glr::tensor::{finite_diff_check, Tensor, UpsampleMode};

fn verdict(name: &str, pass: bool, detail: &str) {
    println!(
        "acceptance {name}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{name}: {detail}");
}

fn fixture() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/two_view_scene")
}

/// Input images and cameras for a generated scene, by view index.
fn rig_inputs(scene: &Scene, ids: &[usize]) -> (Vec<ImageBuffer>, Vec<Camera>) {
    let images = ids
        .iter()
        .map(|&i| render_ground_truth(scene, &scene.cameras[i]))
        .collect();
    let cams = ids.iter().map(|&i| scene.cameras[i].clone()).collect();
    (images, cams)
}

#[test]
fn a01_homography_agrees_with_the_raycast_oracle() {
    let start = Instant::now();
    let o = homography_suite(10_000, 1e-6, 99);
    let dt = start.elapsed();
    verdict(
        "01 homography oracle",
        o.passed && dt < Duration::from_secs(5),
        &format!("{}, {dt:.2?}", o.detail),
    );
}

#[test]
fn a02_identity_sweep_reproduces_the_target_bitwise() {
    let scene = load_scene(&fixture()).unwrap();
    let v0 = scene.view_by_id(0).unwrap();
    let depths = sample_depths(scene.near, scene.far, 8, DepthSampling::Depth).unwrap();
    let (views_n, target_n) = normalize_to_target(std::slice::from_ref(&v0.camera), &v0.camera);
    let psv = build_psv(
        &[v0.image.clone()],
        &views_n,
        &target_n,
        &depths,
        Rect::full(32, 32),
        false,
    )
    .unwrap();

    let hw = 32 * 32;
    let mut exact = true;
    for d in 0..8 {
        for c in 0..3 {
            let off = (d * 3 + c) * hw;
            let slice = &psv.data.data()[off..off + hw];
            exact &= slice
                .iter()
                .zip(v0.image.plane(c))
                .all(|(a, b)| a.to_bits() == b.to_bits());
        }
    }
    verdict(
        "02 identity sweep",
        exact,
        "8 depth slices bit-equal to the 8-bit target image",
    );
}

#[test]
fn a03_sweep_samples_respect_epipolar_geometry() {
    let o = epipolar_suite(123);
    verdict("03 epipolar", o.passed && o.trials == 100, &o.detail);
}

#[test]
fn a04_focus_sweep_minimizes_variance_at_the_true_depth() {
    let scene = generate_scene(5521, 1, 8).unwrap();
    let a_star = scene.planes[0].depth;
    let mut planes = sample_depths(scene.near, scene.far, 64, DepthSampling::Depth).unwrap();
    let idx = planes
        .distances
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| (*a - a_star).abs().total_cmp(&(*b - a_star).abs()))
        .map(|(i, _)| i)
        .unwrap();
    // Pin the closest slice onto the surface so one plane is exactly right.
    planes.distances[idx] = a_star;

    // Score on an interior window clear of the border band: pixels that fall
    // outside a source view are zero-filled, and those bands would otherwise
    // dominate the statistic and drag the argmin off the true depth.
    let rect = Rect {
        x0: 24,
        y0: 24,
        width: 48,
        height: 48,
    };
    let (images, cams) = rig_inputs(&scene, &[1, 2, 3, 4, 5, 6, 7]);
    let (views_n, target_n) = normalize_to_target(&cams, &scene.cameras[0]);
    let psv = build_psv(&images, &views_n, &target_n, &planes, rect, false).unwrap();

    let variance = cross_view_variance(&psv);
    let argmin = variance
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.total_cmp(b))
        .map(|(i, _)| i)
        .unwrap();

    let gt = render_ground_truth(&scene, &scene.cameras[0])
        .crop(rect)
        .unwrap();
    let stack = mean_psv(&psv);
    let at_focus = psnr(&stack[idx], &gt).unwrap();
    let mut others_worse = true;
    let mut runner_up = f64::NEG_INFINITY;
    for (d, img) in stack.iter().enumerate() {
        if d == idx {
            continue;
        }
        let p = psnr(img, &gt).unwrap();
        others_worse &= p < at_focus;
        runner_up = runner_up.max(p);
    }
    verdict(
        "04 focus sweep",
        argmin == idx && at_focus > 40.0 && others_worse,
        &format!(
            "argmin slice {argmin} == true slice {idx}, \
             {at_focus:.1} dB at focus vs {runner_up:.1} dB runner-up"
        ),
    );
}

#[test]
fn a05_stage_shapes_match_the_contract() {
    let cfg = ModelConfig {
        d: 128,
        g: 4,
        c: 16,
        n_views: 3,
        variant: Variant::Shared,
        upsample: UpsampleMode::Nearest,
        with_positional: true,
        with_angular: true,
    };
    let scene = generate_scene(91, 2, 4).unwrap();
    let (images, cams) = rig_inputs(&scene, &[1, 2, 3]);
    let (views_n, target_n) = normalize_to_target(&cams, &scene.cameras[0]);
    let depths = sample_depths(scene.near, scene.far, 128, DepthSampling::Depth).unwrap();
    let rect = Rect {
        x0: 16,
        y0: 16,
        width: 64,
        height: 64,
    };
    let psv = build_psv(&images, &views_n, &target_n, &depths, rect, true).unwrap();

    let x = grouped_input(&psv, &cfg).unwrap();
    let w = init_weights(&cfg, 1).unwrap();
    let y = multi_view_matching(&x, &w).unwrap();
    let z = global_latent_render(&y, &w, Variant::Shared).unwrap();
    let img = upsample_head(&z, &w, UpsampleMode::Nearest).unwrap();

    let pass = x.dims() == [32, 50, 64, 64]
        && y.dims() == [32, 64, 16, 16]
        && z.dims() == [1, 64, 16, 16]
        && (img.channels(), img.height(), img.width()) == (3, 64, 64);
    verdict(
        "05 shape contract",
        pass,
        &format!(
            "{:?} -> {:?} -> {:?} -> (3, 64, 64)",
            x.dims(),
            y.dims(),
            z.dims()
        ),
    );
}

#[test]
fn a06_full_model_gradients_verify_at_64_bit() {
    let start = Instant::now();
    let cfg = ModelConfig {
        d: 8,
        g: 2,
        c: 8,
        n_views: 2,
        variant: Variant::Shared,
        upsample: UpsampleMode::Nearest,
        with_positional: true,
        with_angular: true,
    };
    let wh = 16;
    let params: glr::tensor::ParamSet<f64> = init_weights(&cfg, 61).unwrap().params.cast();
    let model = ConvGlr::new(&cfg).unwrap();

    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(63);
    let xdims = [cfg.d_g(), cfg.grouped_channels(), wh, wh];
    let n: usize = xdims.iter().product();
    let x = Tensor::from_vec(
        &xdims,
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let t: Vec<f64> = (0..3 * wh * wh)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();

    let (pred, cache) = model.forward_all_cached(x.clone(), &params).unwrap();
    let dpred = Tensor::from_vec(
        pred.dims(),
        pred.data().iter().zip(&t).map(|(p, t)| p - t).collect(),
    )
    .unwrap();
    let mut grads = params.zeros_like();
    model
        .backward_all(cache, &params, dpred, &mut grads)
        .unwrap();

    let report = finite_diff_check(
        move |p| {
            let y = model.forward_all(x.clone(), p)?;
            Ok(y.data()
                .iter()
                .zip(&t)
                .map(|(v, t)| 0.5 * (v - t) * (v - t))
                .sum())
        },
        &params,
        &grads,
        1e-6,
        200,
        67,
    )
    .unwrap();
    let dt = start.elapsed();
    verdict(
        "06 gradient check",
        report.max_rel_err < 1e-6 && dt < Duration::from_secs(120),
        &format!(
            "max rel err {:.3e} over {} coordinates, {dt:.2?}",
            report.max_rel_err, report.n_coords
        ),
    );
}

#[test]
fn a07_specialized_replication_matches_shared_rendering() {
    let cfg = ModelConfig {
        d: 8,
        g: 2,
        c: 8,
        n_views: 2,
        variant: Variant::Shared,
        upsample: UpsampleMode::Bilinear,
        with_positional: true,
        with_angular: true,
    };
    let scene = generate_scene(417, 2, 3).unwrap();
    let (images, cams) = rig_inputs(&scene, &[1, 2]);
    let (views_n, target_n) = normalize_to_target(&cams, &scene.cameras[0]);
    let depths = sample_depths(scene.near, scene.far, 8, DepthSampling::Depth).unwrap();
    let rect = Rect {
        x0: 32,
        y0: 32,
        width: 32,
        height: 32,
    };
    let psv = build_psv(&images, &views_n, &target_n, &depths, rect, true).unwrap();

    let shared = init_weights(&cfg, 23).unwrap();
    let spec = specialize_weights(&shared).unwrap();
    let a = forward(&psv, &cfg, &shared).unwrap();
    let b = forward(&psv, &spec.cfg, &spec).unwrap();
    let max_rel = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() as f64 / x.abs().max(1.0) as f64)
        .fold(0.0f64, f64::max);
    verdict(
        "07 variant equivalence",
        max_rel <= 1e-6,
        &format!("max relative difference {max_rel:.3e}"),
    );
}

#[test]
fn a08_overfit_smoke_reaches_the_psnr_bars() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let scene_dir = dir.path().join("scene");
    save_scene(&generate_scene(424242, 3, 10).unwrap(), &scene_dir).unwrap();

    let cfg = TrainConfig {
        scene_dir: scene_dir.clone(),
        input_views: vec![1, 2, 3, 4, 5, 6, 7, 8],
        target_views: vec![0],
        d: 16,
        g: 2,
        c: 16,
        variant: Variant::Shared,
        upsample: UpsampleMode::Nearest,
        pos_enc: true,
        ang_enc: true,
        near: None,
        far: None,
        sampling: DepthSampling::Depth,
        patch: 64,
        batch: 1,
        steps: 2000,
        lr: 1.5e-4,
        clip_norm: 1.0,
        seed: 5,
        loss: LossSchedule::Switch,
        ckpt_every: 0,
        out_dir: dir.path().join("run"),
    };
    let (w, log) = train(&cfg).unwrap();
    assert_eq!(log.rows().len(), 2000);

    let scene = load_scene(&scene_dir).unwrap();
    let score = |id: usize| {
        let img = render_view(
            &w,
            &scene,
            &cfg.input_views,
            id,
            scene.near,
            scene.far,
            cfg.sampling,
            96,
        )
        .unwrap();
        let gt = &scene.view_by_id(id).unwrap().image;
        (psnr(&img, gt).unwrap(), ssim(&img, gt).unwrap())
    };
    let (train_psnr, train_ssim) = score(0);
    let (held_psnr, held_ssim) = score(9);
    let dt = start.elapsed();
    verdict(
        "08 overfit smoke",
        train_psnr >= 30.0 && held_psnr >= 22.0 && dt < Duration::from_secs(1800),
        &format!(
            "training target {train_psnr:.2} dB / ssim {train_ssim:.3} (bar 30), \
             held-out {held_psnr:.2} dB / ssim {held_ssim:.3} (bar 22), {dt:.0?}"
        ),
    );
}

#[test]
fn a09_training_is_bit_deterministic_over_100_steps() {
    let dir = tempfile::tempdir().unwrap();
    let scene_dir = dir.path().join("scene");
    save_scene(&generate_scene(77, 2, 3).unwrap(), &scene_dir).unwrap();
    let cfg = |out: &str| TrainConfig {
        scene_dir: scene_dir.clone(),
        input_views: vec![1, 2],
        target_views: vec![0],
        d: 8,
        g: 2,
        c: 8,
        variant: Variant::Shared,
        upsample: UpsampleMode::Nearest,
        pos_enc: true,
        ang_enc: true,
        near: None,
        far: None,
        sampling: DepthSampling::Depth,
        patch: 32,
        batch: 1,
        steps: 100,
        lr: 1.5e-4,
        clip_norm: 1.0,
        seed: 21,
        loss: LossSchedule::Switch,
        ckpt_every: 100,
        out_dir: dir.path().join(out),
    };
    let (cfg_a, cfg_b) = (cfg("a"), cfg("b"));
    train(&cfg_a).unwrap();
    train(&cfg_b).unwrap();
    let bytes_a = std::fs::read(cfg_a.out_dir.join("ckpt_000100.glrw")).unwrap();
    let bytes_b = std::fs::read(cfg_b.out_dir.join("ckpt_000100.glrw")).unwrap();
    verdict(
        "09 determinism",
        bytes_a == bytes_b,
        &format!(
            "{}-byte checkpoints identical after 100 steps",
            bytes_a.len()
        ),
    );
}

#[test]
fn a10_metric_unit_cases_are_exact() {
    let mut img = ImageBuffer::zeros(3, 16, 16);
    for c in 0..3 {
        for y in 0..16 {
            for x in 0..16 {
                img.set(c, y, x, ((c + y + x) % 7) as f32 / 7.0);
            }
        }
    }
    let identical = psnr(&img, &img).unwrap() == 99.0 && ssim(&img, &img).unwrap() == 1.0;

    // 400 pixels, 16 of them off by 0.5: MSE = 16 * 0.25 / 400 = 0.01 exactly
    // in binary floating point, so the PSNR must be exactly 20 dB.
    let a = ImageBuffer::zeros(1, 20, 20);
    let mut b = ImageBuffer::zeros(1, 20, 20);
    for i in 0..16 {
        b.set(0, i, i, 0.5);
    }
    let twenty = psnr(&a, &b).unwrap();
    verdict(
        "10 metric unit cases",
        identical && twenty == 20.0,
        &format!("identical -> (99 dB, 1.0); MSE 0.01 -> {twenty} dB"),
    );
}

#[test]
fn a11_schedules_fire_at_the_contract_boundaries() {
    let base = 1.0;
    let lr_ok = lr_schedule(799, 1000, base, true) == base
        && lr_schedule(800, 1000, base, true) == base / 10.0
        && lr_schedule(949, 1000, base, true) == base / 10.0
        && lr_schedule(950, 1000, base, true) == base / 100.0
        && lr_schedule(159, 200, base, true) == base
        && lr_schedule(160, 200, base, true) == base / 10.0
        && lr_schedule(189, 200, base, true) == base / 10.0
        && lr_schedule(190, 200, base, true) == base / 100.0;
    let loss_ok = LossSchedule::Switch.at_step(899, 1000).name() == "l2"
        && LossSchedule::Switch.at_step(900, 1000).name() == "l1"
        && LossSchedule::Switch.at_step(179, 200).name() == "l2"
        && LossSchedule::Switch.at_step(180, 200).name() == "l1";
    verdict(
        "11 schedule boundaries",
        lr_ok && loss_ok,
        "lr drops at 80% and 95%, loss switches at 90%",
    );
}
