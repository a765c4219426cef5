//! Slow-ish training sanity: on a single-target overfit at the reference
//! architecture, the squared-error loss drops by an order of magnitude
//! within 500 steps. The loss is pinned to L2 for the whole run so early
//! and late readings are the same metric.

use glr::camera::DepthSampling;
use glr::convglr::Variant;
use glr::harness::{train, LossSchedule, TrainConfig};
use glr::scenes::{generate_scene, save_scene};
use glr::tensor::UpsampleMode;

#[test]
fn loss_drops_tenfold_within_500_steps() {
    let dir = tempfile::tempdir().unwrap();
    let scene_dir = dir.path().join("scene");
    save_scene(&generate_scene(3101, 3, 5).unwrap(), &scene_dir).unwrap();

    let cfg = TrainConfig {
        scene_dir,
        input_views: vec![1, 2, 3],
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
        steps: 500,
        lr: 1.5e-4,
        clip_norm: 1.0,
        seed: 5,
        loss: LossSchedule::L2,
        ckpt_every: 0,
        out_dir: dir.path().join("run"),
    };
    let (_, log) = train(&cfg).unwrap();
    let rows = log.rows();
    assert_eq!(rows.len(), 500);

    // Windowed means so no single lucky or unlucky patch decides the outcome.
    let window = |r: &[glr::harness::TrainLogRow]| {
        r.iter().map(|row| row.loss).sum::<f64>() / r.len() as f64
    };
    let early = window(&rows[8..13]);
    let late = window(&rows[490..500]);
    assert!(
        early / late >= 10.0,
        "loss only fell from {early:.4e} (steps 8..13) to {late:.4e} (steps 490..500)"
    );
    assert!(
        late < 5e-3,
        "converged loss {late:.4e} is too high for a single-view overfit"
    );
}
