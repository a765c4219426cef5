//! Training and evaluation: config parsing, the LR and loss schedules, patch
//! sampling, the Adam training loop with gradient clipping and checkpoints,
//! and full-frame tiled evaluation with PSNR/SSIM reporting.
//!
//! Everything here is single threaded and deterministic: a (config, seed)
//! pair reproduces training bit for bit, which the test suite relies on.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::camera::{normalize_to_target, sample_depths, Camera, DepthSampling};
use crate::convglr::{
    forward, grouped_input, init_weights, save_weights, ConvGlr, ModelConfig, Variant, Weights,
};
use crate::psv::{build_psv, ImageBuffer, Rect};
use crate::scenes::{load_scene, psnr, ssim, SceneData};
use crate::tensor::{adam_step, clip_global_norm, AdamHyper, AdamState, Tensor, UpsampleMode};
use crate::{GlrError, Result};

/// Which pixel loss to apply, possibly switching late in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSchedule {
    /// L2 until 90% of total steps, L1 for the rest.
    Switch,
    L2,
    L1,
}

impl fmt::Display for LossSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossSchedule::Switch => "switch",
            LossSchedule::L2 => "l2",
            LossSchedule::L1 => "l1",
        })
    }
}

impl FromStr for LossSchedule {
    type Err = GlrError;

    fn from_str(s: &str) -> Result<LossSchedule> {
        match s {
            "switch" => Ok(LossSchedule::Switch),
            "l2" => Ok(LossSchedule::L2),
            "l1" => Ok(LossSchedule::L1),
            other => Err(GlrError::Config(format!(
                "unknown loss '{other}' (expected 'switch', 'l2', or 'l1')"
            ))),
        }
    }
}

/// A differentiable image loss. The two built-ins are pixel losses; the
/// interface leaves room for perceptual losses without changing the loop.
pub trait LossFn {
    fn name(&self) -> &'static str;
    /// Mean loss and its gradient with respect to the prediction.
    fn eval(&self, pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<(f64, Tensor<f32>)>;
}

fn check_loss_shapes(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(GlrError::Shape(format!(
            "loss shapes differ: {:?} vs {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

pub struct L2Loss;

impl LossFn for L2Loss {
    fn name(&self) -> &'static str {
        "l2"
    }

    fn eval(&self, pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<(f64, Tensor<f32>)> {
        check_loss_shapes(pred, gt)?;
        let n = pred.numel() as f64;
        let mut loss = 0.0;
        let grad = pred
            .data()
            .iter()
            .zip(gt.data())
            .map(|(&p, &t)| {
                let d = p as f64 - t as f64;
                loss += d * d;
                (2.0 * d / n) as f32
            })
            .collect();
        Ok((loss / n, Tensor::from_vec(pred.dims(), grad)?))
    }
}

pub struct L1Loss;

impl LossFn for L1Loss {
    fn name(&self) -> &'static str {
        "l1"
    }

    fn eval(&self, pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<(f64, Tensor<f32>)> {
        check_loss_shapes(pred, gt)?;
        let n = pred.numel() as f64;
        let mut loss = 0.0;
        // Subgradient at zero is zero.
        let grad = pred
            .data()
            .iter()
            .zip(gt.data())
            .map(|(&p, &t)| {
                let d = p as f64 - t as f64;
                loss += d.abs();
                (if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                } / n) as f32
            })
            .collect();
        Ok((loss / n, Tensor::from_vec(pred.dims(), grad)?))
    }
}

static L2_LOSS: L2Loss = L2Loss;
static L1_LOSS: L1Loss = L1Loss;

impl LossSchedule {
    /// The loss in force at a given step. The switch flips exactly when
    /// `step >= 0.9 * total`, evaluated in integer arithmetic.
    pub fn at_step(&self, step: usize, total: usize) -> &'static dyn LossFn {
        match self {
            LossSchedule::L2 => &L2_LOSS,
            LossSchedule::L1 => &L1_LOSS,
            LossSchedule::Switch => {
                if step * 10 >= total * 9 {
                    &L1_LOSS
                } else {
                    &L2_LOSS
                }
            }
        }
    }
}

/// Piecewise-constant decay: full rate for the first 80% of steps, a tenth
/// until 95%, and a hundredth for the rest when `final_drop` is set (a tenth
/// otherwise). Integer arithmetic keeps the boundaries exact.
pub fn lr_schedule(step: usize, total: usize, base: f64, final_drop: bool) -> f64 {
    if step * 5 < total * 4 {
        base
    } else if !final_drop || step * 20 < total * 19 {
        base / 10.0
    } else {
        base / 100.0
    }
}

/// Uniform patch corner over all valid positions, drawing row then column.
pub fn sample_patch<R: Rng>(rng: &mut R, full: (usize, usize), patch: usize) -> Result<Rect> {
    let (h, w) = full;
    if patch == 0 || patch % 4 != 0 {
        return Err(GlrError::Config(format!(
            "patch size {patch} must be a positive multiple of 4"
        )));
    }
    if patch > h || patch > w {
        return Err(GlrError::Bounds(format!(
            "patch {patch} does not fit in a {h}x{w} frame"
        )));
    }
    let y0 = rng.random_range(0..=h - patch);
    let x0 = rng.random_range(0..=w - patch);
    Ok(Rect {
        x0,
        y0,
        width: patch,
        height: patch,
    })
}

/// Everything a training run needs, mirroring the `key = value` text format.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub scene_dir: PathBuf,
    pub input_views: Vec<usize>,
    pub target_views: Vec<usize>,
    pub d: usize,
    pub g: usize,
    pub c: usize,
    pub variant: Variant,
    pub upsample: UpsampleMode,
    pub pos_enc: bool,
    pub ang_enc: bool,
    /// Depth bounds; `None` falls back to the scene's bounds file.
    pub near: Option<f64>,
    pub far: Option<f64>,
    pub sampling: DepthSampling,
    pub patch: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub loss: LossSchedule,
    /// Checkpoint every this many steps; 0 disables intermediate checkpoints.
    pub ckpt_every: usize,
    pub out_dir: PathBuf,
}

pub(crate) fn parse_id_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    let mut ids = Vec::new();
    for part in s.split(',') {
        let id: usize = part
            .trim()
            .parse()
            .map_err(|_| format!("bad view id '{}'", part.trim()))?;
        if ids.contains(&id) {
            return Err(format!("duplicate view id {id}"));
        }
        ids.push(id);
    }
    Ok(ids)
}

fn fmt_id_list(ids: &[usize]) -> String {
    ids.iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl TrainConfig {
    /// Parses the `key = value` format. Every key must be known, appear at
    /// most once, and the required ones must be present.
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut seen: Vec<(String, String, usize)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| GlrError::Parse { line: i + 1, msg };
            let (key, val) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected 'key = value', found '{line}'")))?;
            let (key, val) = (key.trim(), val.trim());
            if val.is_empty() {
                return Err(err(format!("key '{key}' has no value")));
            }
            if seen.iter().any(|(k, ..)| k == key) {
                return Err(err(format!("duplicate key '{key}'")));
            }
            seen.push((key.to_string(), val.to_string(), i + 1));
        }

        let take = |key: &str| -> Option<(String, usize)> {
            seen.iter()
                .find(|(k, ..)| k == key)
                .map(|(_, v, l)| (v.clone(), *l))
        };
        fn req<T>(key: &str, v: Option<Result<T>>) -> Result<T> {
            v.ok_or_else(|| GlrError::Config(format!("missing required key '{key}'")))?
        }
        fn parsed<T: FromStr>(key: &str, v: Option<(String, usize)>) -> Option<Result<T>> {
            v.map(|(s, line)| {
                s.parse::<T>().map_err(|_| GlrError::Parse {
                    line,
                    msg: format!("bad value '{s}' for '{key}'"),
                })
            })
        }
        // FromStr-based keys with our own error types keep their messages.
        fn enum_key<T: FromStr<Err = GlrError>>(v: Option<(String, usize)>) -> Option<Result<T>> {
            v.map(|(s, line)| {
                s.parse::<T>().map_err(|e| GlrError::Parse {
                    line,
                    msg: e.to_string(),
                })
            })
        }
        fn flag(key: &str, v: Option<(String, usize)>) -> Option<Result<bool>> {
            v.map(|(s, line)| match s.as_str() {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(GlrError::Parse {
                    line,
                    msg: format!("bad flag '{s}' for '{key}' (use 0 or 1)"),
                }),
            })
        }
        let list = |key: &str| -> Option<Result<Vec<usize>>> {
            take(key)
                .map(|(s, line)| parse_id_list(&s).map_err(|msg| GlrError::Parse { line, msg }))
        };

        let known = [
            "scene_dir",
            "input_views",
            "target_views",
            "D",
            "G",
            "C",
            "variant",
            "upsample",
            "pos_enc",
            "ang_enc",
            "near",
            "far",
            "sampling",
            "patch",
            "batch",
            "steps",
            "lr",
            "clip_norm",
            "seed",
            "loss",
            "ckpt_every",
            "out_dir",
        ];
        for (k, _, line) in &seen {
            if !known.contains(&k.as_str()) {
                return Err(GlrError::Parse {
                    line: *line,
                    msg: format!("unknown key '{k}'"),
                });
            }
        }

        let cfg = TrainConfig {
            scene_dir: PathBuf::from(req("scene_dir", take("scene_dir").map(|(s, _)| Ok(s)))?),
            input_views: req("input_views", list("input_views"))?,
            target_views: req("target_views", list("target_views"))?,
            d: req("D", parsed("D", take("D")))?,
            g: req("G", parsed("G", take("G")))?,
            c: req("C", parsed("C", take("C")))?,
            variant: enum_key(take("variant")).unwrap_or(Ok(Variant::Shared))?,
            upsample: enum_key(take("upsample")).unwrap_or(Ok(UpsampleMode::Nearest))?,
            pos_enc: flag("pos_enc", take("pos_enc")).unwrap_or(Ok(true))?,
            ang_enc: flag("ang_enc", take("ang_enc")).unwrap_or(Ok(true))?,
            near: parsed("near", take("near")).transpose()?,
            far: parsed("far", take("far")).transpose()?,
            sampling: enum_key(take("sampling")).unwrap_or(Ok(DepthSampling::Depth))?,
            patch: req("patch", parsed("patch", take("patch")))?,
            batch: parsed("batch", take("batch")).unwrap_or(Ok(1))?,
            steps: req("steps", parsed("steps", take("steps")))?,
            lr: req("lr", parsed("lr", take("lr")))?,
            clip_norm: parsed("clip_norm", take("clip_norm")).unwrap_or(Ok(1.0))?,
            seed: req("seed", parsed("seed", take("seed")))?,
            loss: enum_key(take("loss")).unwrap_or(Ok(LossSchedule::Switch))?,
            ckpt_every: parsed("ckpt_every", take("ckpt_every")).unwrap_or(Ok(0))?,
            out_dir: PathBuf::from(req("out_dir", take("out_dir").map(|(s, _)| Ok(s)))?),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                GlrError::MissingFile(path.display().to_string())
            } else {
                GlrError::Io(e)
            }
        })?;
        Self::parse(&text)
    }

    /// Canonical text form; parsing it reproduces this config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scene_dir = {}", self.scene_dir.display());
        let _ = writeln!(s, "input_views = {}", fmt_id_list(&self.input_views));
        let _ = writeln!(s, "target_views = {}", fmt_id_list(&self.target_views));
        let _ = writeln!(s, "D = {}", self.d);
        let _ = writeln!(s, "G = {}", self.g);
        let _ = writeln!(s, "C = {}", self.c);
        let _ = writeln!(s, "variant = {}", self.variant);
        let _ = writeln!(s, "upsample = {}", self.upsample);
        let _ = writeln!(s, "pos_enc = {}", self.pos_enc as u8);
        let _ = writeln!(s, "ang_enc = {}", self.ang_enc as u8);
        if let Some(near) = self.near {
            let _ = writeln!(s, "near = {near}");
        }
        if let Some(far) = self.far {
            let _ = writeln!(s, "far = {far}");
        }
        let _ = writeln!(s, "sampling = {}", self.sampling);
        let _ = writeln!(s, "patch = {}", self.patch);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "clip_norm = {}", self.clip_norm);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "loss = {}", self.loss);
        let _ = writeln!(s, "ckpt_every = {}", self.ckpt_every);
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        s
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            g: self.g,
            c: self.c,
            n_views: self.input_views.len(),
            variant: self.variant,
            upsample: self.upsample,
            with_positional: self.pos_enc,
            with_angular: self.ang_enc,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch < 4 || self.patch % 4 != 0 {
            return Err(GlrError::Config(format!(
                "patch size {} must be a positive multiple of 4",
                self.patch
            )));
        }
        if self.steps < 1 {
            return Err(GlrError::Config("steps must be at least 1".into()));
        }
        if self.batch < 1 {
            return Err(GlrError::Config("batch must be at least 1".into()));
        }
        if self.input_views.is_empty() || self.target_views.is_empty() {
            return Err(GlrError::Config("need input and target view lists".into()));
        }
        if let Some(id) = self
            .target_views
            .iter()
            .find(|t| self.input_views.contains(t))
        {
            return Err(GlrError::Config(format!(
                "view {id} is both an input and a target; targets must be held out"
            )));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(GlrError::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(self.clip_norm > 0.0) || !self.clip_norm.is_finite() {
            return Err(GlrError::Config(format!(
                "clip_norm must be positive, got {}",
                self.clip_norm
            )));
        }
        if let (Some(near), Some(far)) = (self.near, self.far) {
            if !(near > 0.0 && near < far) {
                return Err(GlrError::Config(format!(
                    "need 0 < near < far, got near {near}, far {far}"
                )));
            }
        }
        self.model_config().validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Append-only per-step record with strictly increasing step indices.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    rows: Vec<TrainLogRow>,
}

impl TrainLog {
    pub fn new() -> TrainLog {
        TrainLog { rows: Vec::new() }
    }

    pub fn push(&mut self, row: TrainLogRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(GlrError::Config(format!(
                    "log steps must increase: {} after {}",
                    row.step, last.step
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[TrainLogRow] {
        &self.rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,lr,grad_norm\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.step, r.loss, r.lr, r.grad_norm);
        }
        s
    }
}

struct TargetCtx {
    views_n: Vec<Camera>,
    target_n: Camera,
    gt: ImageBuffer,
}

fn resolve_bounds(cfg: &TrainConfig, scene: &SceneData) -> Result<(f64, f64)> {
    let near = cfg.near.unwrap_or(scene.near);
    let far = cfg.far.unwrap_or(scene.far);
    if !(near > 0.0 && near < far) {
        return Err(GlrError::Bounds(format!(
            "need 0 < near < far, got near {near}, far {far}"
        )));
    }
    Ok((near, far))
}

fn gather_inputs(cfg: &TrainConfig, scene: &SceneData) -> Result<(Vec<ImageBuffer>, Vec<Camera>)> {
    let mut images = Vec::with_capacity(cfg.input_views.len());
    let mut cams = Vec::with_capacity(cfg.input_views.len());
    for &id in &cfg.input_views {
        let v = scene.view_by_id(id)?;
        images.push(v.image.clone());
        cams.push(v.camera.clone());
    }
    Ok((images, cams))
}

/// Initializes weights from the config seed and trains from step 0.
pub fn train(cfg: &TrainConfig) -> Result<(Weights, TrainLog)> {
    cfg.validate()?;
    let weights = init_weights(&cfg.model_config(), cfg.seed)?;
    train_from(cfg, weights, 0)
}

/// Runs steps `start_step..cfg.steps` of the schedule on existing weights.
/// With no steps remaining the weights pass through unchanged. Step indices,
/// the LR schedule, and the loss switch all use global step numbers, and the
/// patch sampler is reseeded from the config, so a fresh run and a resumed
/// run only match bitwise when resuming from step 0.
pub fn train_from(
    cfg: &TrainConfig,
    mut weights: Weights,
    start_step: usize,
) -> Result<(Weights, TrainLog)> {
    cfg.validate()?;
    let mcfg = cfg.model_config();
    if weights.cfg != mcfg {
        return Err(GlrError::Config(
            "checkpoint model shape does not match the training config".into(),
        ));
    }
    let scene = load_scene(&cfg.scene_dir)?;
    let (near, far) = resolve_bounds(cfg, &scene)?;
    let depths = sample_depths(near, far, cfg.d, cfg.sampling)?;
    let (input_images, input_cams) = gather_inputs(cfg, &scene)?;
    let targets: Vec<TargetCtx> = cfg
        .target_views
        .iter()
        .map(|&id| {
            let v = scene.view_by_id(id)?;
            if v.camera.height < cfg.patch || v.camera.width < cfg.patch {
                return Err(GlrError::Bounds(format!(
                    "patch {} exceeds view {id}'s {}x{} frame",
                    cfg.patch, v.camera.height, v.camera.width
                )));
            }
            let (views_n, target_n) = normalize_to_target(&input_cams, &v.camera);
            Ok(TargetCtx {
                views_n,
                target_n,
                gt: v.image.clone(),
            })
        })
        .collect::<Result<_>>()?;

    fs::create_dir_all(&cfg.out_dir)?;
    let model = ConvGlr::new(&mcfg)?;
    // Patch sampling gets its own stream, offset from the init seed.
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut adam = AdamState::new(&weights.params);
    let mut hyper = AdamHyper::with_lr(cfg.lr as f32);
    let mut log = TrainLog::new();

    for step in start_step..cfg.steps {
        let lr = lr_schedule(step, cfg.steps, cfg.lr, true);
        hyper.lr = lr as f32;
        let loss_fn = cfg.loss.at_step(step, cfg.steps);
        let mut grads = weights.params.zeros_like();
        let mut loss_sum = 0.0;
        for _ in 0..cfg.batch {
            // Draw order per sample: target index, patch row, patch column.
            let t = &targets[rng.random_range(0..targets.len())];
            let rect = sample_patch(&mut rng, (t.target_n.height, t.target_n.width), cfg.patch)?;
            let psv = build_psv(
                &input_images,
                &t.views_n,
                &t.target_n,
                &depths,
                rect,
                cfg.ang_enc,
            )?;
            let x = grouped_input(&psv, &mcfg)?;
            let (pred, cache) = model.forward_all_cached(x, &weights.params)?;
            let gt =
                t.gt.crop(rect)?
                    .to_tensor()
                    .reshape(&[1, 3, cfg.patch, cfg.patch])?;
            let (loss, dpred) = loss_fn.eval(&pred, &gt)?;
            loss_sum += loss;
            model.backward_all(cache, &weights.params, dpred, &mut grads)?;
        }
        let loss = loss_sum / cfg.batch as f64;
        if cfg.batch > 1 {
            grads.scale_assign(1.0 / cfg.batch as f32);
        }
        let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm)?;
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(GlrError::NonFinite(format!(
                "training aborted at step {step}: loss {loss}, lr {lr}, grad norm {grad_norm}"
            )));
        }
        adam_step(&mut weights.params, &grads, &mut adam, &hyper)?;
        log.push(TrainLogRow {
            step,
            loss,
            lr,
            grad_norm,
        })?;
        if cfg.ckpt_every > 0 && (step + 1) % cfg.ckpt_every == 0 {
            let path = cfg.out_dir.join(format!("ckpt_{:06}.glrw", step + 1));
            save_weights(&path, &weights)?;
        }
    }

    save_weights(&cfg.out_dir.join("weights.glrw"), &weights)?;
    fs::write(cfg.out_dir.join("train_log.csv"), log.to_csv())?;
    fs::write(cfg.out_dir.join("config.txt"), cfg.to_text())?;
    Ok((weights, log))
}

/// Renders a full frame by tiling it into non-overlapping patches (edge tiles
/// shrink; every tile size stays a multiple of 4). Positional channels use
/// global coordinates, so tile content is placement-consistent.
pub fn render_view(
    w: &Weights,
    scene: &SceneData,
    input_ids: &[usize],
    target_id: usize,
    near: f64,
    far: f64,
    sampling: DepthSampling,
    tile: usize,
) -> Result<ImageBuffer> {
    if input_ids.contains(&target_id) {
        return Err(GlrError::Config(format!(
            "target view {target_id} is among the inputs"
        )));
    }
    if tile < 4 || tile % 4 != 0 {
        return Err(GlrError::Config(format!(
            "tile size {tile} must be a positive multiple of 4"
        )));
    }
    let target = scene.view_by_id(target_id)?;
    let (fh, fw) = (target.camera.height, target.camera.width);
    if fh % 4 != 0 || fw % 4 != 0 {
        return Err(GlrError::Config(format!(
            "frame {fh}x{fw} must be divisible by 4 to render"
        )));
    }
    let depths = sample_depths(near, far, w.cfg.d, sampling)?;
    let mut images = Vec::with_capacity(input_ids.len());
    let mut cams = Vec::with_capacity(input_ids.len());
    for &id in input_ids {
        let v = scene.view_by_id(id)?;
        images.push(v.image.clone());
        cams.push(v.camera.clone());
    }
    let (views_n, target_n) = normalize_to_target(&cams, &target.camera);

    let mut canvas = ImageBuffer::zeros(3, fh, fw);
    let mut y0 = 0;
    while y0 < fh {
        let th = tile.min(fh - y0);
        let mut x0 = 0;
        while x0 < fw {
            let tw = tile.min(fw - x0);
            let rect = Rect {
                x0,
                y0,
                width: tw,
                height: th,
            };
            let psv = build_psv(
                &images,
                &views_n,
                &target_n,
                &depths,
                rect,
                w.cfg.with_angular,
            )?;
            let patch = forward(&psv, &w.cfg, w)?;
            for ch in 0..3 {
                for y in 0..th {
                    for x in 0..tw {
                        canvas.set(ch, y0 + y, x0 + x, patch.get(ch, y, x));
                    }
                }
            }
            x0 += tw;
        }
        y0 += th;
    }
    Ok(canvas)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("view,psnr,ssim\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.view, r.psnr, r.ssim);
        }
        let _ = writeln!(s, "mean,{},{}", self.mean_psnr, self.mean_ssim);
        s
    }
}

/// Scores already-rendered predictions against their scene ground truth.
pub fn metrics_table(preds: &[(usize, ImageBuffer)], scene: &SceneData) -> Result<EvalReport> {
    if preds.is_empty() {
        return Err(GlrError::Config("nothing to evaluate".into()));
    }
    let mut rows = Vec::with_capacity(preds.len());
    for (id, pred) in preds {
        let gt = &scene.view_by_id(*id)?.image;
        rows.push(EvalRow {
            view: *id,
            psnr: psnr(pred, gt)?,
            ssim: ssim(pred, gt)?,
        });
    }
    let n = rows.len() as f64;
    let mean_psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
    let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
    Ok(EvalReport {
        rows,
        mean_psnr,
        mean_ssim,
    })
}

/// Renders every requested target full frame and reports PSNR/SSIM per view
/// plus the mean. Targets must be held out from the input views.
pub fn evaluate(
    w: &Weights,
    cfg: &TrainConfig,
    scene: &SceneData,
    target_ids: &[usize],
) -> Result<EvalReport> {
    if target_ids.is_empty() {
        return Err(GlrError::Config("no evaluation targets given".into()));
    }
    for id in target_ids {
        if cfg.input_views.contains(id) {
            return Err(GlrError::Config(format!(
                "evaluation target {id} is among the input views"
            )));
        }
    }
    let (near, far) = resolve_bounds(cfg, scene)?;
    let mut preds = Vec::with_capacity(target_ids.len());
    for &id in target_ids {
        let img = render_view(
            w,
            scene,
            &cfg.input_views,
            id,
            near,
            far,
            cfg.sampling,
            cfg.patch,
        )?;
        preds.push((id, img));
    }
    metrics_table(&preds, scene)
}
