//! Command-line front end. A thin shell over the library: every subcommand
//! is a few library calls, so scripts and direct library use see identical
//! behavior and identical bytes on disk.
//!
//! Exit codes: 0 success, 1 computation or suite failure, 2 usage or input
//! errors (unknown flags, unreadable files, bad configs).

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::camera::{
    normalize_to_target, plane_homography, sample_depths, Camera, DepthPlanes, DepthSampling,
};
use crate::container::save_tensor;
use crate::convglr::load_weights;
use crate::harness::{metrics_table, parse_id_list, render_view, train, TrainConfig};
use crate::psv::{build_psv, cross_view_variance, mean_psv, ImageBuffer, Rect};
use crate::scenes::{generate_scene, load_scene, save_scene, write_ppm, SceneData};
use crate::selftest::run_all;
use crate::{GlrError, Result};
use nalgebra::Vector3;

#[derive(Parser)]
#[command(
    name = "glr",
    about = "Novel view synthesis via plane sweep volumes and a learned depth-collapsing renderer"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a plane sweep volume for one target view and save it as a tensor
    BuildPsv(BuildPsvArgs),
    /// Train a renderer from a `key = value` config file
    Train(TrainArgs),
    /// Render held-out views and report PSNR/SSIM per view and mean
    Eval(EvalArgs),
    /// Render one view with trained weights to a PPM image
    Render(RenderArgs),
    /// Inspection utilities
    #[command(subcommand)]
    Diagnose(DiagnoseCmd),
    /// Run the built-in verification suites (geometry oracle, epipolar,
    /// gradients); exits nonzero if any fails
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct BuildPsvArgs {
    /// Scene directory (cameras.txt, bounds.txt, view PPMs)
    #[arg(long)]
    scene: PathBuf,
    /// Target view id
    #[arg(long)]
    target: usize,
    /// Number of sweep planes
    #[arg(long)]
    depths: usize,
    /// Near plane distance; defaults to the scene's bound
    #[arg(long)]
    near: Option<f64>,
    /// Far plane distance; defaults to the scene's bound
    #[arg(long)]
    far: Option<f64>,
    /// Plane spacing: uniform in depth or in inverse depth
    #[arg(long, default_value_t = DepthSampling::Depth)]
    sampling: DepthSampling,
    /// Output tensor file
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated input view ids; defaults to every view in the scene
    #[arg(long)]
    views: Option<String>,
    /// Append the per-view angular encoding as a fourth channel
    #[arg(long)]
    angular: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config file
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Trained weights file
    #[arg(long)]
    weights: PathBuf,
    /// Comma-separated held-out target view ids
    #[arg(long)]
    targets: String,
    /// Where to write the CSV report
    #[arg(long)]
    report: PathBuf,
    /// Comma-separated input view ids; defaults to every non-target view
    #[arg(long)]
    views: Option<String>,
    #[arg(long)]
    near: Option<f64>,
    #[arg(long)]
    far: Option<f64>,
    #[arg(long, default_value_t = DepthSampling::Depth)]
    sampling: DepthSampling,
    /// Render tile edge in pixels (multiple of 4)
    #[arg(long, default_value_t = 48)]
    tile: usize,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// Target view id
    #[arg(long)]
    target: usize,
    /// Output PPM path
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated input view ids; defaults to every non-target view
    #[arg(long)]
    views: Option<String>,
    #[arg(long)]
    near: Option<f64>,
    #[arg(long)]
    far: Option<f64>,
    #[arg(long, default_value_t = DepthSampling::Depth)]
    sampling: DepthSampling,
    /// Render tile edge in pixels (multiple of 4)
    #[arg(long, default_value_t = 48)]
    tile: usize,
}

#[derive(Subcommand)]
enum DiagnoseCmd {
    /// Write the per-depth view-averaged sweep stack as PPMs and report
    /// which slice is sharpest (lowest cross-view variance)
    Focus(FocusArgs),
    /// Generate a procedural scene directory for experiments
    GenScene(GenSceneArgs),
}

#[derive(Args)]
struct FocusArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Target view id
    #[arg(long)]
    target: usize,
    /// Output directory for the stack
    #[arg(long)]
    out: PathBuf,
    /// Number of sweep planes
    #[arg(long, default_value_t = 32)]
    depths: usize,
    #[arg(long)]
    near: Option<f64>,
    #[arg(long)]
    far: Option<f64>,
    #[arg(long, default_value_t = DepthSampling::Depth)]
    sampling: DepthSampling,
    /// Comma-separated input view ids; defaults to every non-target view
    #[arg(long)]
    views: Option<String>,
}

#[derive(Args)]
struct GenSceneArgs {
    /// Output scene directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Number of textured planes
    #[arg(long, default_value_t = 3)]
    planes: usize,
    /// Number of cameras
    #[arg(long, default_value_t = 10)]
    rig: usize,
}

#[derive(Args)]
struct SelftestArgs {
    /// Seed for the randomized suites
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn parse_views(s: &str) -> Result<Vec<usize>> {
    parse_id_list(s).map_err(GlrError::Config)
}

fn default_inputs(scene: &SceneData, exclude: &[usize]) -> Vec<usize> {
    scene
        .views
        .iter()
        .map(|v| v.id)
        .filter(|id| !exclude.contains(id))
        .collect()
}

fn bounds_or_scene(near: Option<f64>, far: Option<f64>, scene: &SceneData) -> Result<(f64, f64)> {
    let near = near.unwrap_or(scene.near);
    let far = far.unwrap_or(scene.far);
    if !(near > 0.0 && near < far) {
        return Err(GlrError::Bounds(format!(
            "need 0 < near < far, got near {near}, far {far}"
        )));
    }
    Ok((near, far))
}

fn gather(scene: &SceneData, ids: &[usize]) -> Result<(Vec<ImageBuffer>, Vec<Camera>)> {
    let mut images = Vec::with_capacity(ids.len());
    let mut cams = Vec::with_capacity(ids.len());
    for &id in ids {
        let v = scene.view_by_id(id)?;
        images.push(v.image.clone());
        cams.push(v.camera.clone());
    }
    Ok((images, cams))
}

fn run_build_psv(a: &BuildPsvArgs) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let ids = match &a.views {
        Some(s) => parse_views(s)?,
        None => scene.views.iter().map(|v| v.id).collect(),
    };
    let target = scene.view_by_id(a.target)?;
    let (near, far) = bounds_or_scene(a.near, a.far, &scene)?;
    let depths = sample_depths(near, far, a.depths, a.sampling)?;
    let (images, cams) = gather(&scene, &ids)?;
    let (views_n, target_n) = normalize_to_target(&cams, &target.camera);
    let rect = Rect::full(target.camera.width, target.camera.height);
    let psv = build_psv(&images, &views_n, &target_n, &depths, rect, a.angular)?;
    save_tensor(&a.out, &psv.data)?;
    println!("wrote volume {:?} to {}", psv.data.dims(), a.out.display());
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let cfg = TrainConfig::from_file(&a.config)?;
    let (_, log) = train(&cfg)?;
    if let Some(last) = log.rows().last() {
        println!(
            "trained {} steps; final loss {:.6e}, grad norm {:.3e}",
            log.rows().len(),
            last.loss,
            last.grad_norm
        );
    }
    println!("weights: {}", cfg.out_dir.join("weights.glrw").display());
    println!("log: {}", cfg.out_dir.join("train_log.csv").display());
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let w = load_weights(&a.weights)?;
    let targets = parse_views(&a.targets)?;
    if targets.is_empty() {
        return Err(GlrError::Config("no evaluation targets given".into()));
    }
    let inputs = match &a.views {
        Some(s) => parse_views(s)?,
        None => default_inputs(&scene, &targets),
    };
    let (near, far) = bounds_or_scene(a.near, a.far, &scene)?;
    let mut preds = Vec::with_capacity(targets.len());
    for &id in &targets {
        let img = render_view(&w, &scene, &inputs, id, near, far, a.sampling, a.tile)?;
        preds.push((id, img));
    }
    let report = metrics_table(&preds, &scene)?;
    fs::write(&a.report, report.to_csv())?;
    for r in &report.rows {
        println!("view {}: psnr {:.2} dB, ssim {:.4}", r.view, r.psnr, r.ssim);
    }
    println!(
        "mean: psnr {:.2} dB, ssim {:.4}",
        report.mean_psnr, report.mean_ssim
    );
    println!("report: {}", a.report.display());
    Ok(())
}

fn run_render(a: &RenderArgs) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let w = load_weights(&a.weights)?;
    let inputs = match &a.views {
        Some(s) => parse_views(s)?,
        None => default_inputs(&scene, &[a.target]),
    };
    let (near, far) = bounds_or_scene(a.near, a.far, &scene)?;
    let img = render_view(&w, &scene, &inputs, a.target, near, far, a.sampling, a.tile)?;
    write_ppm(&a.out, &img)?;
    println!("wrote view {} to {}", a.target, a.out.display());
    Ok(())
}

fn run_focus(a: &FocusArgs) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let target = scene.view_by_id(a.target)?;
    let inputs = match &a.views {
        Some(s) => parse_views(s)?,
        None => default_inputs(&scene, &[a.target]),
    };
    let (near, far) = bounds_or_scene(a.near, a.far, &scene)?;
    let depths = sample_depths(near, far, a.depths, a.sampling)?;
    let (images, cams) = gather(&scene, &inputs)?;
    let (views_n, target_n) = normalize_to_target(&cams, &target.camera);
    let rect = Rect::full(target.camera.width, target.camera.height);
    // RGB only: the stack is meant to be looked at.
    let psv = build_psv(&images, &views_n, &target_n, &depths, rect, false)?;

    fs::create_dir_all(&a.out)?;
    for (i, img) in mean_psv(&psv).iter().enumerate() {
        write_ppm(&a.out.join(format!("slice_{i:03}.ppm")), img)?;
    }
    // Score sharpness away from the frame edge: pixels that fall outside a
    // source view are zero-filled, and those bands would otherwise dominate
    // the cross-view statistic and drag the argmin off the true depth.
    let window = interior_window(&views_n, &target_n, &depths)?;
    println!(
        "focus window: {}x{} at ({}, {})",
        window.width, window.height, window.x0, window.y0
    );
    let interior = build_psv(&images, &views_n, &target_n, &depths, window, false)?;
    let variance = cross_view_variance(&interior);
    let mut best = 0;
    for (i, (d, v)) in depths.distances.iter().zip(&variance).enumerate() {
        println!("slice {i:03}: depth {d:.4}, variance {v:.6e}");
        if variance[i] < variance[best] {
            best = i;
        }
    }
    println!(
        "sharpest slice {best} (depth {:.4})",
        depths.distances[best]
    );

    // With generator metadata available, say where the true surfaces sit.
    if let Some(meta) = scene.meta {
        if let Ok(truth) = generate_scene(meta.seed, meta.n_planes, meta.rig_size) {
            for (pi, plane) in truth.planes.iter().enumerate() {
                let nearest = depths
                    .distances
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| {
                        (*a - plane.depth)
                            .abs()
                            .total_cmp(&(*b - plane.depth).abs())
                    })
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                println!(
                    "plane {pi}: true depth {:.4}, nearest slice {nearest}",
                    plane.depth
                );
            }
        }
    }
    Ok(())
}

/// Largest centered window whose warped samples stay inside every source
/// view over the whole depth range. The bound comes from corner and center
/// displacements of the plane-induced maps at the extreme depths, padded by
/// two pixels; the window never shrinks below 16x16.
fn interior_window(views: &[Camera], target: &Camera, depths: &DepthPlanes) -> Result<Rect> {
    let (w, h) = (target.width, target.height);
    let (xm, ym) = (w as f64 - 1.0, h as f64 - 1.0);
    let probes = [
        (0.0, 0.0),
        (xm, 0.0),
        (0.0, ym),
        (xm, ym),
        (xm / 2.0, ym / 2.0),
    ];
    let extremes = [
        *depths.distances.first().expect("non-empty depth list"),
        *depths.distances.last().expect("non-empty depth list"),
    ];
    let mut shift = 0.0f64;
    for v in views {
        for &a_d in &extremes {
            let hm = plane_homography(v, target, a_d)?;
            for &(x, y) in &probes {
                let q = hm * Vector3::new(x, y, 1.0);
                if q.z.abs() < 1e-12 {
                    continue;
                }
                shift = shift.max((q.x / q.z - x).abs()).max((q.y / q.z - y).abs());
            }
        }
    }
    let margin = (shift.ceil() as usize + 2)
        .min(w.saturating_sub(16) / 2)
        .min(h.saturating_sub(16) / 2);
    Ok(Rect {
        x0: margin,
        y0: margin,
        width: w - 2 * margin,
        height: h - 2 * margin,
    })
}

fn run_gen_scene(a: &GenSceneArgs) -> Result<()> {
    let scene = generate_scene(a.seed, a.planes, a.rig)?;
    save_scene(&scene, &a.out)?;
    println!(
        "wrote {} views, {} planes (seed {}) to {}",
        a.rig,
        a.planes,
        a.seed,
        a.out.display()
    );
    Ok(())
}

fn run_selftest(a: &SelftestArgs) -> i32 {
    let outcomes = run_all(a.seed);
    let mut ok = true;
    for o in &outcomes {
        println!("{o}");
        ok &= o.passed;
    }
    if ok {
        println!("selftest: all suites passed");
        0
    } else {
        eprintln!("selftest: FAILED");
        1
    }
}

/// Parses argv and dispatches. Returns the process exit code instead of
/// exiting so tests can call it in process.
pub fn run<I: IntoIterator<Item = String>>(args: I) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.cmd {
        Cmd::BuildPsv(a) => run_build_psv(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::Render(a) => run_render(a),
        Cmd::Diagnose(DiagnoseCmd::Focus(a)) => run_focus(a),
        Cmd::Diagnose(DiagnoseCmd::GenScene(a)) => run_gen_scene(a),
        Cmd::Selftest(a) => return run_selftest(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
