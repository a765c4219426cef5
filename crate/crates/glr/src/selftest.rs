//! Runtime verification suites behind the `selftest` subcommand: homography
//! warps checked against a raycasting oracle, epipolar consistency of sweep
//! resampling, and 64-bit finite-difference gradient spot checks.
//!
//! Each suite draws its own randomized geometry, so a pass exercises the
//! library well beyond the fixed cases in the unit tests.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::camera::{
    fundamental_matrix, normalize_to_target, plane_homography, sample_depths,
    unproject_project_oracle, Camera, DepthSampling,
};
use crate::convglr::{init_weights, ConvGlr, ModelConfig, Variant};
use crate::tensor::{
    conv2d, conv2d_backward, finite_diff_check, resblock, resblock_backward,
    resblock_forward_cached, upsample2x, upsample2x_backward, NamedTensors, ParamSet,
    ResblockWeights, Tensor, UpsampleMode,
};
use crate::Result;

/// Result of one verification suite.
#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub passed: bool,
    /// Randomized cases the suite completed.
    pub trials: usize,
    /// Human-readable numbers behind the verdict.
    pub detail: String,
}

impl std::fmt::Display for SuiteOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} ({} trials; {})",
            self.name,
            if self.passed { "pass" } else { "FAIL" },
            self.trials,
            self.detail
        )
    }
}

/// Random 64x64 camera looking from near the origin toward a point around
/// z ~ 1.4, so depths in [0.9, 1.9] stay in front of every sampled pose.
fn random_camera<R: Rng>(rng: &mut R) -> Camera {
    let k = Matrix3::new(
        rng.random_range(90.0..140.0),
        0.0,
        rng.random_range(30.0..34.0),
        0.0,
        rng.random_range(90.0..140.0),
        rng.random_range(30.0..34.0),
        0.0,
        0.0,
        1.0,
    );
    loop {
        let c = Vector3::new(
            rng.random_range(-0.35..0.35),
            rng.random_range(-0.35..0.35),
            rng.random_range(-0.25..0.15),
        );
        let look = Vector3::new(
            rng.random_range(-0.15..0.15),
            rng.random_range(-0.15..0.15),
            rng.random_range(1.25..1.55),
        );
        let z = (look - c).normalize();
        let x = Vector3::new(0.0, 1.0, 0.0).cross(&z);
        if x.norm() < 1e-3 {
            continue;
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        if let Ok(cam) = Camera::new(k, r, -r * c, 64, 64) {
            return cam;
        }
    }
}

/// Compares the plane-induced homography against unproject-and-reproject
/// raycasting over random (camera pair, depth, pixel) triples.
pub fn homography_suite(trials: usize, tol_px: f64, seed: u64) -> SuiteOutcome {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    let mut attempts = 0;
    while done < trials && attempts < trials.saturating_mul(10) {
        attempts += 1;
        let raw_target = random_camera(&mut rng);
        let raw_view = random_camera(&mut rng);
        let (views, target) = normalize_to_target(&[raw_view], &raw_target);
        let a_d = rng.random_range(0.9..1.9);
        let px = (rng.random_range(0.0..63.0), rng.random_range(0.0..63.0));
        let Ok(expect) = unproject_project_oracle(&views[0], &target, a_d, px) else {
            continue;
        };
        let Ok(h) = plane_homography(&views[0], &target, a_d) else {
            continue;
        };
        let q = h * Vector3::new(px.0, px.1, 1.0);
        if q.z <= 0.0 {
            continue;
        }
        let err = (q.x / q.z - expect.0).hypot(q.y / q.z - expect.1);
        worst = worst.max(err);
        done += 1;
    }
    SuiteOutcome {
        name: "homography",
        passed: done == trials && worst < tol_px,
        trials: done,
        detail: format!("worst error {worst:.3e} px, tolerance {tol_px:.0e}"),
    }
}

/// Checks that per-depth warps of a fixed target pixel trace a straight line
/// in each source view and satisfy the fundamental-matrix constraint.
pub fn epipolar_suite(seed: u64) -> SuiteOutcome {
    const D: usize = 32;
    const RAYS: usize = 100;
    let line_tol = 1e-6;
    let epi_tol = 1e-8;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    // Three-view rig: one target, two sources with a real baseline to it.
    let (views, target) = loop {
        let raw_target = random_camera(&mut rng);
        let raws = vec![random_camera(&mut rng), random_camera(&mut rng)];
        if raws
            .iter()
            .all(|v| (v.center() - raw_target.center()).norm() > 0.05)
        {
            break normalize_to_target(&raws, &raw_target);
        }
    };
    let depths = sample_depths(0.9, 1.9, D, DepthSampling::Depth).unwrap();
    let funds: Vec<Matrix3<f64>> = views
        .iter()
        .map(|v| fundamental_matrix(v, &target).unwrap())
        .collect();

    let mut worst_line = 0.0f64;
    let mut worst_epi = 0.0f64;
    let mut done = 0;
    let mut attempts = 0;
    while done < RAYS && attempts < RAYS * 10 {
        attempts += 1;
        let px = (rng.random_range(0.0..63.0), rng.random_range(0.0..63.0));
        let x_t = Vector3::new(px.0, px.1, 1.0);
        let mut ray_line = 0.0f64;
        let mut ray_epi = 0.0f64;
        let mut ok = true;
        for (view, f) in views.iter().zip(&funds) {
            let mut pts = Vec::with_capacity(D);
            for &a_d in &depths.distances {
                let q = plane_homography(view, &target, a_d).unwrap() * x_t;
                if q.z <= 0.0 {
                    ok = false;
                    break;
                }
                let p = (q.x / q.z, q.y / q.z);
                ray_epi = ray_epi.max((Vector3::new(p.0, p.1, 1.0).dot(&(f * x_t))).abs());
                pts.push(p);
            }
            if !ok {
                break;
            }
            // Deviation from the chord between the extreme depths.
            let (p0, p1) = (pts[0], pts[D - 1]);
            let len = (p1.0 - p0.0).hypot(p1.1 - p0.1);
            if len < 1e-9 {
                ok = false; // view center on the ray: no epipolar line to test
                break;
            }
            let n = ((p0.1 - p1.1) / len, (p1.0 - p0.0) / len);
            for p in &pts {
                ray_line = ray_line.max(((p.0 - p0.0) * n.0 + (p.1 - p0.1) * n.1).abs());
            }
        }
        if !ok {
            continue;
        }
        worst_line = worst_line.max(ray_line);
        worst_epi = worst_epi.max(ray_epi);
        done += 1;
    }
    SuiteOutcome {
        name: "epipolar",
        passed: done == RAYS && worst_line < line_tol && worst_epi < epi_tol,
        trials: done,
        detail: format!(
            "worst line deviation {worst_line:.3e} px (tol {line_tol:.0e}), \
             worst residual {worst_epi:.3e} (tol {epi_tol:.0e})"
        ),
    }
}

fn rand_tensor<R: Rng>(dims: &[usize], rng: &mut R) -> Tensor<f64> {
    let n = dims.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(dims, data).unwrap()
}

/// Residual of y against a fixed random target under 0.5 * sum((y - t)^2).
fn objective(y: &Tensor<f64>, t: &[f64]) -> f64 {
    y.data()
        .iter()
        .zip(t)
        .map(|(v, t)| 0.5 * (v - t) * (v - t))
        .sum()
}

fn dy_for(y: &Tensor<f64>, t: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(
        y.dims(),
        y.data().iter().zip(t).map(|(v, t)| v - t).collect(),
    )
    .unwrap()
}

fn conv_check(
    x_dims: &[usize],
    w_dims: &[usize],
    stride: usize,
    groups: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut params = NamedTensors::new();
    params.insert("x", rand_tensor(x_dims, &mut rng))?;
    params.insert("w", rand_tensor(w_dims, &mut rng))?;
    params.insert("b", rand_tensor(&[w_dims[0]], &mut rng))?;

    let y = conv2d(
        params.get("x")?,
        params.get("w")?,
        params.get("b")?,
        stride,
        groups,
    )?;
    let t: Vec<f64> = (0..y.numel())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let dy = dy_for(&y, &t);
    let (dx, dw, db) = conv2d_backward(
        params.get("x")?,
        params.get("w")?,
        stride,
        groups,
        &dy,
        true,
    )?;
    let mut grads = params.zeros_like();
    *grads.get_mut("x")? = dx;
    *grads.get_mut("w")? = dw;
    *grads.get_mut("b")? = db;

    let report = finite_diff_check(
        move |p: &ParamSet<f64>| {
            let y = conv2d(p.get("x")?, p.get("w")?, p.get("b")?, stride, groups)?;
            Ok(objective(&y, &t))
        },
        &params,
        &grads,
        1e-6,
        150,
        seed ^ 0x5eed,
    )?;
    Ok(report.max_rel_err)
}

fn resblock_check(cin: usize, cout: usize, groups: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut params = NamedTensors::new();
    params.insert("x", rand_tensor(&[1, cin, 6, 6], &mut rng))?;
    params.insert("c1w", rand_tensor(&[cout, cin / groups, 3, 3], &mut rng))?;
    params.insert("c1b", rand_tensor(&[cout], &mut rng))?;
    params.insert("c2w", rand_tensor(&[cout, cout / groups, 3, 3], &mut rng))?;
    params.insert("c2b", rand_tensor(&[cout], &mut rng))?;
    let projected = cin != cout;
    if projected {
        params.insert("sw", rand_tensor(&[cout, cin / groups, 1, 1], &mut rng))?;
        params.insert("sb", rand_tensor(&[cout], &mut rng))?;
    }
    fn assemble<'a>(p: &'a ParamSet<f64>, projected: bool) -> Result<ResblockWeights<'a, f64>> {
        Ok(ResblockWeights {
            conv1_w: p.get("c1w")?,
            conv1_b: p.get("c1b")?,
            conv2_w: p.get("c2w")?,
            conv2_b: p.get("c2b")?,
            skip: if projected {
                Some((p.get("sw")?, p.get("sb")?))
            } else {
                None
            },
        })
    }

    let w = assemble(&params, projected)?;
    let (y, cache) = resblock_forward_cached(params.get("x")?, &w, groups)?;
    let t: Vec<f64> = (0..y.numel())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let dy = dy_for(&y, &t);
    let (dx, [dw1, db1, dw2, db2], dskip) = resblock_backward(&cache, &w, groups, &dy)?;
    let mut grads = params.zeros_like();
    *grads.get_mut("x")? = dx;
    *grads.get_mut("c1w")? = dw1;
    *grads.get_mut("c1b")? = db1;
    *grads.get_mut("c2w")? = dw2;
    *grads.get_mut("c2b")? = db2;
    if let Some((dsw, dsb)) = dskip {
        *grads.get_mut("sw")? = dsw;
        *grads.get_mut("sb")? = dsb;
    }

    let report = finite_diff_check(
        move |p: &ParamSet<f64>| {
            let w = assemble(p, projected)?;
            let y = resblock(p.get("x")?, &w, groups)?;
            Ok(objective(&y, &t))
        },
        &params,
        &grads,
        1e-6,
        150,
        seed ^ 0x5eed,
    )?;
    Ok(report.max_rel_err)
}

fn upsample_check(mode: UpsampleMode, seed: u64) -> Result<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut params = NamedTensors::new();
    params.insert("x", rand_tensor(&[1, 3, 5, 6], &mut rng))?;

    let y = upsample2x(params.get("x")?, mode)?;
    let t: Vec<f64> = (0..y.numel())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let dy = dy_for(&y, &t);
    let in_dims = params.get("x")?.dims().to_vec();
    let mut grads = params.zeros_like();
    *grads.get_mut("x")? = upsample2x_backward(mode, &in_dims, &dy)?;

    let report = finite_diff_check(
        move |p: &ParamSet<f64>| {
            let y = upsample2x(p.get("x")?, mode)?;
            Ok(objective(&y, &t))
        },
        &params,
        &grads,
        1e-6,
        100,
        seed ^ 0x5eed,
    )?;
    Ok(report.max_rel_err)
}

fn model_check(seed: u64) -> Result<f64> {
    let cfg = ModelConfig {
        d: 4,
        g: 2,
        c: 4,
        n_views: 1,
        variant: Variant::Shared,
        upsample: UpsampleMode::Bilinear,
        with_positional: true,
        with_angular: true,
    };
    let wh = 8;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let params: ParamSet<f64> = init_weights(&cfg, seed)?.params.cast();
    let model = ConvGlr::new(&cfg)?;
    let x = rand_tensor(&[cfg.d_g(), cfg.grouped_channels(), wh, wh], &mut rng).map(|v| v * 0.5);
    let t: Vec<f64> = (0..3 * wh * wh)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();

    let (pred, cache) = model.forward_all_cached(x.clone(), &params)?;
    let dpred = dy_for(&pred, &t);
    let mut grads = params.zeros_like();
    model.backward_all(cache, &params, dpred, &mut grads)?;

    let modelf = model.clone();
    let report = finite_diff_check(
        move |p: &ParamSet<f64>| {
            let y = modelf.forward_all(x.clone(), p)?;
            Ok(objective(&y, &t))
        },
        &params,
        &grads,
        1e-6,
        150,
        seed ^ 0x5eed,
    )?;
    Ok(report.max_rel_err)
}

/// Finite-difference spot checks of every differentiable building block plus
/// the composed model, all in f64 where the tolerance is 1e-6 relative.
pub fn gradient_suite(seed: u64) -> SuiteOutcome {
    let tol = 1e-6;
    let checks: Vec<(&'static str, Result<f64>)> = vec![
        (
            "conv 3x3",
            conv_check(&[2, 3, 6, 6], &[4, 3, 3, 3], 1, 1, seed),
        ),
        (
            "conv 3x3 s2 g2",
            conv_check(&[1, 4, 8, 8], &[6, 2, 3, 3], 2, 2, seed + 1),
        ),
        (
            "conv 1x1",
            conv_check(&[1, 3, 5, 5], &[2, 3, 1, 1], 1, 1, seed + 2),
        ),
        ("resblock projected", resblock_check(3, 5, 1, seed + 3)),
        ("resblock grouped", resblock_check(4, 4, 2, seed + 4)),
        (
            "upsample nearest",
            upsample_check(UpsampleMode::Nearest, seed + 5),
        ),
        (
            "upsample bilinear",
            upsample_check(UpsampleMode::Bilinear, seed + 6),
        ),
        ("full model", model_check(seed + 7)),
    ];
    let trials = checks.len();
    let mut worst = 0.0f64;
    let mut worst_name = "";
    for (name, res) in &checks {
        match res {
            Ok(err) => {
                if *err >= worst {
                    worst = *err;
                    worst_name = name;
                }
            }
            Err(e) => {
                return SuiteOutcome {
                    name: "gradients",
                    passed: false,
                    trials,
                    detail: format!("{name} failed to run: {e}"),
                };
            }
        }
    }
    SuiteOutcome {
        name: "gradients",
        passed: worst < tol,
        trials,
        detail: format!(
            "{trials} checks, worst rel err {worst:.3e} ({worst_name}), tolerance {tol:.0e}"
        ),
    }
}

/// Runs every suite with derived seeds. The caller decides how to report.
pub fn run_all(seed: u64) -> Vec<SuiteOutcome> {
    vec![
        homography_suite(10_000, 1e-6, seed),
        epipolar_suite(seed.wrapping_add(1)),
        gradient_suite(seed.wrapping_add(2)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        let outcomes = run_all(7);
        assert_eq!(outcomes.len(), 3);
        for o in &outcomes {
            assert!(o.passed, "{o}");
        }
        assert_eq!(outcomes[0].trials, 10_000);
        assert_eq!(outcomes[1].trials, 100);
        assert_eq!(outcomes[2].trials, 8);
    }

    #[test]
    fn impossible_tolerance_fails_the_homography_suite() {
        let o = homography_suite(50, 0.0, 3);
        assert!(!o.passed);
        assert_eq!(o.trials, 50);
        assert!(o.to_string().contains("FAIL"));
    }

    #[test]
    fn outcome_lines_read_well() {
        let o = homography_suite(100, 1e-6, 9);
        let line = o.to_string();
        assert!(line.starts_with("homography: pass (100 trials;"), "{line}");
        assert!(line.contains("tolerance"), "{line}");
    }
}
