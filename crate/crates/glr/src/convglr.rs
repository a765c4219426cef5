//! The convolutional renderer: a grouped plane sweep volume goes through
//! multi-view matching (depth groups ride the batch dimension), a ladder of
//! pairwise depth-merging stages that collapse the volume to a single latent
//! image, and a 4x upsampling head that decodes it to color.
//!
//! Two variants differ only in the merging ladder: `shared` applies one
//! resblock per stage across all remaining depths, `specialized` gives every
//! depth pair its own weights via grouped convolutions. A shared checkpoint
//! can be replicated into a specialized one that computes the same function.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Cursor, ErrorKind, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::container;
use crate::psv::{append_positional_channels, group_depths, ImageBuffer, PlaneSweepVolume};
use crate::tensor::{
    conv2d, conv2d_backward, resblock_backward, resblock_forward_cached, upsample2x,
    upsample2x_backward, GradStore, ParamSet, ResblockCache, ResblockWeights, Scalar, Tensor,
    UpsampleMode,
};
use crate::{GlrError, Result};

/// Weight-sharing scheme of the depth-merging ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// One resblock per stage, shared across remaining depths.
    Shared,
    /// Per-depth-pair weights via grouped convolution.
    Specialized,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Shared => "shared",
            Variant::Specialized => "specialized",
        })
    }
}

impl FromStr for Variant {
    type Err = GlrError;

    fn from_str(s: &str) -> Result<Variant> {
        match s {
            "shared" => Ok(Variant::Shared),
            "specialized" => Ok(Variant::Specialized),
            other => Err(GlrError::Config(format!(
                "unknown variant '{other}' (expected 'shared' or 'specialized')"
            ))),
        }
    }
}

/// Hyperparameters that fully determine the network's weight shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Number of sweep depth planes.
    pub d: usize,
    /// Depths stacked into one channel group.
    pub g: usize,
    /// Base channel width.
    pub c: usize,
    /// Input views per volume.
    pub n_views: usize,
    pub variant: Variant,
    pub upsample: UpsampleMode,
    /// Two normalized global-coordinate channels appended to each group.
    pub with_positional: bool,
    /// Per-view angular encoding as a fourth color channel.
    pub with_angular: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c == 0 {
            return Err(GlrError::Config("base channel width C must be >= 1".into()));
        }
        if self.n_views == 0 {
            return Err(GlrError::Config("need at least one input view".into()));
        }
        if self.g == 0 || self.d % self.g != 0 {
            return Err(GlrError::Config(format!(
                "depth count D={} not divisible by group size G={}",
                self.d, self.g
            )));
        }
        let d_g = self.d / self.g;
        if d_g < 2 || !d_g.is_power_of_two() {
            return Err(GlrError::Config(format!(
                "D/G must be a power of two >= 2, got {d_g}"
            )));
        }
        Ok(())
    }

    /// Depth groups after stacking: the ladder's starting depth extent.
    pub fn d_g(&self) -> usize {
        self.d / self.g
    }

    /// Channels per view in the volume: RGB plus the optional angular channel.
    pub fn cin(&self) -> usize {
        3 + self.with_angular as usize
    }

    /// Channels of the grouped volume the first conv sees.
    pub fn grouped_channels(&self) -> usize {
        self.cin() * self.g * self.n_views + 2 * self.with_positional as usize
    }

    /// Pairwise merging stages until the depth extent reaches 1.
    pub fn n_render_stages(&self) -> usize {
        self.d_g().trailing_zeros() as usize
    }
}

#[derive(Debug, Clone)]
enum LayerKind {
    Conv {
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
    },
    Res {
        cin: usize,
        cout: usize,
        groups: usize,
    },
    /// `[n, c, h, w] -> [n/2, 2c, h, w]`: concatenates adjacent depth pairs
    /// along channels. Pure reshape in this memory layout.
    Collapse2,
    /// `[n, c, h, w] -> [1, n*c, h, w]`, so grouped convs can span depths.
    Flatten,
    /// `[1, n*c, h, w] -> [n, c, h, w]`.
    Unflatten { n: usize },
    /// 2x spatial upsample in the config's mode.
    Up,
}

#[derive(Debug, Clone)]
struct LayerDef {
    name: String,
    kind: LayerKind,
}

/// Name and shape of one weight tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
}

/// The network structure: an ordered layer list split into the three stages.
#[derive(Debug, Clone)]
pub struct ConvGlr {
    cfg: ModelConfig,
    layers: Vec<LayerDef>,
    match_end: usize,
    render_end: usize,
}

impl ConvGlr {
    pub fn new(cfg: &ModelConfig) -> Result<ConvGlr> {
        cfg.validate()?;
        let c = cfg.c;
        let mut layers = Vec::new();
        let conv = |name: &str, cin, cout, k, stride| LayerDef {
            name: name.into(),
            kind: LayerKind::Conv {
                cin,
                cout,
                k,
                stride,
                groups: 1,
            },
        };
        let res = |name: String, cin, cout, groups| LayerDef {
            name,
            kind: LayerKind::Res { cin, cout, groups },
        };

        layers.push(conv("match.conv_in", cfg.grouped_channels(), c, 3, 1));
        for i in 0..2 {
            layers.push(res(format!("match.res{i}"), c, c, 1));
        }
        layers.push(conv("match.down0", c, 2 * c, 3, 2));
        for i in 2..5 {
            layers.push(res(format!("match.res{i}"), 2 * c, 2 * c, 1));
        }
        layers.push(conv("match.down1", 2 * c, 4 * c, 3, 2));
        for i in 5..9 {
            layers.push(res(format!("match.res{i}"), 4 * c, 4 * c, 1));
        }
        let match_end = layers.len();

        for s in 0..cfg.n_render_stages() {
            let n_out = cfg.d_g() >> (s + 1);
            let name = format!("render.stage{s}");
            layers.push(LayerDef {
                name: format!("{name}.pair"),
                kind: LayerKind::Collapse2,
            });
            match cfg.variant {
                Variant::Shared => layers.push(res(name, 8 * c, 4 * c, 1)),
                Variant::Specialized => {
                    layers.push(LayerDef {
                        name: format!("{name}.flatten"),
                        kind: LayerKind::Flatten,
                    });
                    layers.push(res(name.clone(), n_out * 8 * c, n_out * 4 * c, n_out));
                    layers.push(LayerDef {
                        name: format!("{name}.unflatten"),
                        kind: LayerKind::Unflatten { n: n_out },
                    });
                }
            }
        }
        let render_end = layers.len();

        layers.push(LayerDef {
            name: "up.interp0".into(),
            kind: LayerKind::Up,
        });
        layers.push(res("up.res0".into(), 4 * c, 2 * c, 1));
        layers.push(res("up.res1".into(), 2 * c, 2 * c, 1));
        layers.push(res("up.res2".into(), 2 * c, 2 * c, 1));
        layers.push(LayerDef {
            name: "up.interp1".into(),
            kind: LayerKind::Up,
        });
        layers.push(res("up.res3".into(), 2 * c, c, 1));
        layers.push(res("up.res4".into(), c, c, 1));
        layers.push(conv("up.conv_out", c, 3, 1, 1));

        Ok(ConvGlr {
            cfg: *cfg,
            layers,
            match_end,
            render_end,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Weight names and shapes, in initialization and checkpoint order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut push = |name: String, dims: Vec<usize>| specs.push(ParamSpec { name, dims });
        for l in &self.layers {
            match l.kind {
                LayerKind::Conv {
                    cin,
                    cout,
                    k,
                    groups,
                    ..
                } => {
                    push(format!("{}.w", l.name), vec![cout, cin / groups, k, k]);
                    push(format!("{}.b", l.name), vec![cout]);
                }
                LayerKind::Res { cin, cout, groups } => {
                    push(
                        format!("{}.conv1.w", l.name),
                        vec![cout, cin / groups, 3, 3],
                    );
                    push(format!("{}.conv1.b", l.name), vec![cout]);
                    push(
                        format!("{}.conv2.w", l.name),
                        vec![cout, cout / groups, 3, 3],
                    );
                    push(format!("{}.conv2.b", l.name), vec![cout]);
                    if cin != cout {
                        push(format!("{}.skip.w", l.name), vec![cout, cin / groups, 1, 1]);
                        push(format!("{}.skip.b", l.name), vec![cout]);
                    }
                }
                _ => {}
            }
        }
        specs
    }

    fn matching(&self) -> &[LayerDef] {
        &self.layers[..self.match_end]
    }

    fn render(&self) -> &[LayerDef] {
        &self.layers[self.match_end..self.render_end]
    }

    fn head(&self) -> &[LayerDef] {
        &self.layers[self.render_end..]
    }

    /// Runs the whole pipeline on a grouped volume tensor, no caching.
    /// Output is the unclamped `[1, 3, H, W]` prediction.
    pub fn forward_all<S: Scalar>(&self, x: Tensor<S>, params: &ParamSet<S>) -> Result<Tensor<S>> {
        let (y, _) = run_layers(x, &self.layers, params, self.cfg.upsample, false)?;
        Ok(y)
    }

    /// Like [`forward_all`](Self::forward_all) but keeps every intermediate
    /// needed by [`backward_all`](Self::backward_all).
    pub fn forward_all_cached<S: Scalar>(
        &self,
        x: Tensor<S>,
        params: &ParamSet<S>,
    ) -> Result<(Tensor<S>, PipelineCache<S>)> {
        let (y, caches) = run_layers(x, &self.layers, params, self.cfg.upsample, true)?;
        Ok((y, PipelineCache(caches)))
    }

    /// Accumulates parameter gradients into `grads` (which must be
    /// zero-initialized or hold a previous accumulation). The volume itself is
    /// not differentiated: the first conv skips its input gradient.
    pub fn backward_all<S: Scalar>(
        &self,
        cache: PipelineCache<S>,
        params: &ParamSet<S>,
        dy: Tensor<S>,
        grads: &mut GradStore<S>,
    ) -> Result<()> {
        backward_layers(
            &self.layers,
            cache.0,
            params,
            self.cfg.upsample,
            dy,
            grads,
            false,
        )?;
        Ok(())
    }
}

/// Saved intermediates of one cached forward pass.
pub struct PipelineCache<S>(Vec<StageCache<S>>);

enum StageCache<S> {
    Conv { x: Tensor<S> },
    Res(ResblockCache<S>),
    Reshape { in_dims: Vec<usize> },
    Up { in_dims: Vec<usize> },
}

fn named_err(name: &str, e: GlrError) -> GlrError {
    match e {
        GlrError::Shape(m) => GlrError::Shape(format!("{name}: {m}")),
        other => other,
    }
}

fn res_weights<'a, S: Scalar>(
    params: &'a ParamSet<S>,
    name: &str,
    has_skip: bool,
) -> Result<ResblockWeights<'a, S>> {
    Ok(ResblockWeights {
        conv1_w: params.get(&format!("{name}.conv1.w"))?,
        conv1_b: params.get(&format!("{name}.conv1.b"))?,
        conv2_w: params.get(&format!("{name}.conv2.w"))?,
        conv2_b: params.get(&format!("{name}.conv2.b"))?,
        skip: if has_skip {
            Some((
                params.get(&format!("{name}.skip.w"))?,
                params.get(&format!("{name}.skip.b"))?,
            ))
        } else {
            None
        },
    })
}

fn run_layers<S: Scalar>(
    mut x: Tensor<S>,
    layers: &[LayerDef],
    params: &ParamSet<S>,
    mode: UpsampleMode,
    want_cache: bool,
) -> Result<(Tensor<S>, Vec<StageCache<S>>)> {
    let mut caches = Vec::with_capacity(if want_cache { layers.len() } else { 0 });
    for l in layers {
        match &l.kind {
            LayerKind::Conv { stride, groups, .. } => {
                let w = params.get(&format!("{}.w", l.name))?;
                let b = params.get(&format!("{}.b", l.name))?;
                let y = conv2d(&x, w, b, *stride, *groups).map_err(|e| named_err(&l.name, e))?;
                if want_cache {
                    caches.push(StageCache::Conv { x });
                }
                x = y;
            }
            LayerKind::Res { cin, cout, groups } => {
                let w = res_weights(params, &l.name, cin != cout)?;
                let (y, cache) =
                    resblock_forward_cached(&x, &w, *groups).map_err(|e| named_err(&l.name, e))?;
                if want_cache {
                    caches.push(StageCache::Res(cache));
                }
                x = y;
            }
            LayerKind::Collapse2 => {
                let d = x.dims().to_vec();
                if d.len() != 4 || d[0] % 2 != 0 {
                    return Err(GlrError::Shape(format!(
                        "{}: need an even depth extent to pair, got {d:?}",
                        l.name
                    )));
                }
                if want_cache {
                    caches.push(StageCache::Reshape { in_dims: d.clone() });
                }
                x = x.reshape(&[d[0] / 2, 2 * d[1], d[2], d[3]])?;
            }
            LayerKind::Flatten => {
                let d = x.dims().to_vec();
                if want_cache {
                    caches.push(StageCache::Reshape { in_dims: d.clone() });
                }
                x = x.reshape(&[1, d[0] * d[1], d[2], d[3]])?;
            }
            LayerKind::Unflatten { n } => {
                let d = x.dims().to_vec();
                if d[0] != 1 || d[1] % n != 0 {
                    return Err(GlrError::Shape(format!(
                        "{}: cannot split {d:?} into {n} depths",
                        l.name
                    )));
                }
                if want_cache {
                    caches.push(StageCache::Reshape { in_dims: d.clone() });
                }
                x = x.reshape(&[*n, d[1] / n, d[2], d[3]])?;
            }
            LayerKind::Up => {
                if want_cache {
                    caches.push(StageCache::Up {
                        in_dims: x.dims().to_vec(),
                    });
                }
                x = upsample2x(&x, mode).map_err(|e| named_err(&l.name, e))?;
            }
        }
    }
    Ok((x, caches))
}

fn backward_layers<S: Scalar>(
    layers: &[LayerDef],
    caches: Vec<StageCache<S>>,
    params: &ParamSet<S>,
    mode: UpsampleMode,
    mut dy: Tensor<S>,
    grads: &mut GradStore<S>,
    input_grad: bool,
) -> Result<Tensor<S>> {
    if caches.len() != layers.len() {
        return Err(GlrError::Shape("cache does not match layer list".into()));
    }
    for (idx, (l, cache)) in layers.iter().zip(caches).enumerate().rev() {
        match (&l.kind, cache) {
            (LayerKind::Conv { stride, groups, .. }, StageCache::Conv { x }) => {
                let w = params.get(&format!("{}.w", l.name))?;
                let need_dx = input_grad || idx > 0;
                let (dx, dw, db) = conv2d_backward(&x, w, *stride, *groups, &dy, need_dx)
                    .map_err(|e| named_err(&l.name, e))?;
                grads.get_mut(&format!("{}.w", l.name))?.add_assign(&dw)?;
                grads.get_mut(&format!("{}.b", l.name))?.add_assign(&db)?;
                dy = dx;
            }
            (LayerKind::Res { cin, cout, groups }, StageCache::Res(cache)) => {
                let w = res_weights(params, &l.name, cin != cout)?;
                let (dx, [dw1, db1, dw2, db2], dskip) = resblock_backward(&cache, &w, *groups, &dy)
                    .map_err(|e| named_err(&l.name, e))?;
                grads
                    .get_mut(&format!("{}.conv1.w", l.name))?
                    .add_assign(&dw1)?;
                grads
                    .get_mut(&format!("{}.conv1.b", l.name))?
                    .add_assign(&db1)?;
                grads
                    .get_mut(&format!("{}.conv2.w", l.name))?
                    .add_assign(&dw2)?;
                grads
                    .get_mut(&format!("{}.conv2.b", l.name))?
                    .add_assign(&db2)?;
                if let Some((dws, dbs)) = dskip {
                    grads
                        .get_mut(&format!("{}.skip.w", l.name))?
                        .add_assign(&dws)?;
                    grads
                        .get_mut(&format!("{}.skip.b", l.name))?
                        .add_assign(&dbs)?;
                }
                dy = dx;
            }
            (
                LayerKind::Collapse2 | LayerKind::Flatten | LayerKind::Unflatten { .. },
                StageCache::Reshape { in_dims },
            ) => {
                dy = dy.reshape(&in_dims)?;
            }
            (LayerKind::Up, StageCache::Up { in_dims }) => {
                dy = upsample2x_backward(mode, &in_dims, &dy).map_err(|e| named_err(&l.name, e))?;
            }
            _ => return Err(GlrError::Shape(format!("{}: cache kind mismatch", l.name))),
        }
    }
    Ok(dy)
}

/// Named weight collection tied to the config that shaped it.
#[derive(Debug, Clone)]
pub struct Weights {
    pub cfg: ModelConfig,
    pub params: ParamSet<f32>,
}

impl Weights {
    pub fn n_params(&self) -> usize {
        self.params.scalar_count()
    }
}

/// Deterministic weight initialization: convolution kernels uniform in
/// `±sqrt(1 / fan_in)` with `fan_in = (Cin/groups) * k^2`, biases zero. The
/// same seed always produces bit-identical weights.
pub fn init_weights(cfg: &ModelConfig, seed: u64) -> Result<Weights> {
    let model = ConvGlr::new(cfg)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for spec in model.param_specs() {
        let t = if spec.name.ends_with(".b") {
            Tensor::zeros(&spec.dims)
        } else {
            let fan_in: usize = spec.dims[1..].iter().product();
            let bound = (1.0 / fan_in as f64).sqrt();
            let numel: usize = spec.dims.iter().product();
            let data = (0..numel)
                .map(|_| ((rng.random::<f32>() as f64 * 2.0 - 1.0) * bound) as f32)
                .collect();
            Tensor::from_vec(&spec.dims, data)?
        };
        params.insert(&spec.name, t)?;
    }
    Ok(Weights { cfg: *cfg, params })
}

/// Converts shared weights into the specialized layout by replicating each
/// merging-stage resblock across its depth pairs. The resulting network
/// computes the same function as the shared one.
pub fn specialize_weights(w: &Weights) -> Result<Weights> {
    if w.cfg.variant != Variant::Shared {
        return Err(GlrError::Config("weights are already specialized".into()));
    }
    let mut cfg = w.cfg;
    cfg.variant = Variant::Specialized;
    let model = ConvGlr::new(&cfg)?;
    let mut params = ParamSet::new();
    for spec in model.param_specs() {
        let src = w.params.get(&spec.name)?;
        let t = if spec.dims == src.dims() {
            src.clone()
        } else {
            // A merging-stage tensor: dim 0 grows by the group count, the
            // tail is unchanged. Replicating the whole buffer stacks one copy
            // of the shared block per depth pair.
            let reps = spec.dims[0] / src.dims()[0];
            if spec.dims[1..] != src.dims()[1..] || reps * src.dims()[0] != spec.dims[0] {
                return Err(GlrError::Shape(format!(
                    "{}: cannot replicate {:?} into {:?}",
                    spec.name,
                    src.dims(),
                    spec.dims
                )));
            }
            let mut data = Vec::with_capacity(src.numel() * reps);
            for _ in 0..reps {
                data.extend_from_slice(src.data());
            }
            Tensor::from_vec(&spec.dims, data)?
        };
        params.insert(&spec.name, t)?;
    }
    Ok(Weights { cfg, params })
}

fn check_dims(name: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(GlrError::Config(format!(
            "{name}: got {got:?}, expected {want:?}"
        )));
    }
    Ok(())
}

/// First stage: per-depth-group view aggregation at 1/4 resolution.
/// `[D_G, C_in_g, H, W] -> [D_G, 4C, H/4, W/4]`; depth groups ride the batch
/// dimension, so weights are shared across depth.
pub fn multi_view_matching(g: &Tensor<f32>, w: &Weights) -> Result<Tensor<f32>> {
    let model = ConvGlr::new(&w.cfg)?;
    let cfg = &w.cfg;
    if g.dims().len() != 4 {
        return Err(GlrError::Config(format!(
            "matching input must be 4D, got {:?}",
            g.dims()
        )));
    }
    check_dims(
        "matching input depth groups and channels",
        &g.dims()[..2],
        &[cfg.d_g(), cfg.grouped_channels()],
    )?;
    if g.dims()[2] % 4 != 0 || g.dims()[3] % 4 != 0 {
        return Err(GlrError::Config(format!(
            "spatial size {}x{} must be divisible by 4",
            g.dims()[2],
            g.dims()[3]
        )));
    }
    let (y, _) = run_layers(g.clone(), model.matching(), &w.params, cfg.upsample, false)?;
    Ok(y)
}

/// Second stage: merge depth pairs until one latent image remains.
/// `[D_G, 4C, H/4, W/4] -> [1, 4C, H/4, W/4]`. The variant is taken
/// explicitly and must match the weights.
pub fn global_latent_render(y: &Tensor<f32>, w: &Weights, variant: Variant) -> Result<Tensor<f32>> {
    if variant != w.cfg.variant {
        return Err(GlrError::Config(format!(
            "requested variant '{variant}' but weights are '{}'",
            w.cfg.variant
        )));
    }
    let model = ConvGlr::new(&w.cfg)?;
    if y.dims().len() != 4 {
        return Err(GlrError::Config(format!(
            "latent volume must be 4D, got {:?}",
            y.dims()
        )));
    }
    check_dims(
        "latent volume depth and channels",
        &y.dims()[..2],
        &[w.cfg.d_g(), 4 * w.cfg.c],
    )?;
    let (z, _) = run_layers(y.clone(), model.render(), &w.params, w.cfg.upsample, false)?;
    Ok(z)
}

/// Final stage: 4x upsampling decode to a color image, clamped to `[0, 1]`.
/// `[1, 4C, H/4, W/4] -> ImageBuffer[3, H, W]`. The mode must match the
/// weights' config.
pub fn upsample_head(z: &Tensor<f32>, w: &Weights, mode: UpsampleMode) -> Result<ImageBuffer> {
    if mode != w.cfg.upsample {
        return Err(GlrError::Config(format!(
            "requested upsample mode '{mode}' but weights use '{}'",
            w.cfg.upsample
        )));
    }
    let model = ConvGlr::new(&w.cfg)?;
    if z.dims().len() != 4 {
        return Err(GlrError::Config(format!(
            "latent image must be 4D, got {:?}",
            z.dims()
        )));
    }
    check_dims(
        "latent image depth and channels",
        &z.dims()[..2],
        &[1, 4 * w.cfg.c],
    )?;
    let (y, _) = run_layers(z.clone(), model.head(), &w.params, w.cfg.upsample, false)?;
    let d = y.dims().to_vec();
    let img = y.reshape(&[d[1], d[2], d[3]])?;
    ImageBuffer::from_tensor_clamped(&img)
}

/// Checks a volume against the config, naming the offending dimension.
fn check_psv(psv: &PlaneSweepVolume, cfg: &ModelConfig) -> Result<()> {
    if psv.n_depths() != cfg.d {
        return Err(GlrError::Config(format!(
            "depth planes: volume has D={}, config wants D={}",
            psv.n_depths(),
            cfg.d
        )));
    }
    if psv.n_views() != cfg.n_views {
        return Err(GlrError::Config(format!(
            "views: volume has V={}, config wants V={}",
            psv.n_views(),
            cfg.n_views
        )));
    }
    if psv.cin() != cfg.cin() {
        return Err(GlrError::Config(format!(
            "per-view channels: volume has Cin={}, config wants Cin={} (with_angular={})",
            psv.cin(),
            cfg.cin(),
            cfg.with_angular
        )));
    }
    if psv.height() % 4 != 0 || psv.width() % 4 != 0 {
        return Err(GlrError::Config(format!(
            "patch size: {}x{} must be divisible by 4",
            psv.height(),
            psv.width()
        )));
    }
    Ok(())
}

/// Groups a volume and appends conditioning channels per the config,
/// producing the `[D_G, C_in_g, H, W]` network input.
pub fn grouped_input(psv: &PlaneSweepVolume, cfg: &ModelConfig) -> Result<Tensor<f32>> {
    check_psv(psv, cfg)?;
    let mut grouped = group_depths(psv, cfg.g)?;
    if cfg.with_positional {
        grouped = append_positional_channels(grouped)?;
    }
    Ok(grouped.data)
}

/// End-to-end render: volume in, clamped color image out.
pub fn forward(psv: &PlaneSweepVolume, cfg: &ModelConfig, w: &Weights) -> Result<ImageBuffer> {
    if *cfg != w.cfg {
        return Err(GlrError::Config(
            "model config does not match the one the weights were built for".into(),
        ));
    }
    let model = ConvGlr::new(cfg)?;
    let x = grouped_input(psv, cfg)?;
    let y = model.forward_all(x, &w.params)?;
    let d = y.dims().to_vec();
    let img = y.reshape(&[d[1], d[2], d[3]])?;
    ImageBuffer::from_tensor_clamped(&img)
}

const CKPT_MAGIC: &str = "GLRW";
const CKPT_VERSION: u32 = 1;

/// Serializes weights as a self-describing checkpoint: an ASCII manifest
/// (config, then one `param <name> f32 <rank> <dims..> <offset>` line per
/// tensor) followed by the concatenated binary tensor containers.
pub fn save_weights(path: &Path, w: &Weights) -> Result<()> {
    let cfg = &w.cfg;
    let mut blob = Vec::new();
    let mut manifest = format!(
        "{CKPT_MAGIC} {CKPT_VERSION}\nd {}\ng {}\nc {}\nviews {}\nvariant {}\nupsample {}\npos_enc {}\nang_enc {}\nparams {}\n",
        cfg.d,
        cfg.g,
        cfg.c,
        cfg.n_views,
        cfg.variant,
        cfg.upsample,
        cfg.with_positional as u8,
        cfg.with_angular as u8,
        w.params.len()
    );
    for (name, t) in w.params.iter() {
        let offset = blob.len();
        container::write_tensor(&mut blob, t)?;
        manifest.push_str(&format!("param {name} f32 {}", t.dims().len()));
        for d in t.dims() {
            manifest.push_str(&format!(" {d}"));
        }
        manifest.push_str(&format!(" {offset}\n"));
    }
    manifest.push_str(&format!("blob {}\n", blob.len()));
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(manifest.as_bytes())?;
    out.write_all(&blob)?;
    out.flush()?;
    Ok(())
}

fn ckpt_err(msg: impl Into<String>) -> GlrError {
    GlrError::Format(format!("checkpoint: {}", msg.into()))
}

/// Loads a checkpoint written by [`save_weights`], validating the manifest
/// against the config's expected parameter names and shapes.
pub fn load_weights(path: &Path) -> Result<Weights> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == ErrorKind::NotFound {
            GlrError::MissingFile(path.display().to_string())
        } else {
            GlrError::Io(e)
        }
    })?;

    // Manifest lines up to and including "blob <n>"; binary payload after.
    let mut pos = 0;
    let mut lines: Vec<String> = Vec::new();
    let mut blob_len: Option<usize> = None;
    while pos < bytes.len() {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| pos + i)
            .ok_or_else(|| ckpt_err("manifest ended without a blob line"))?;
        let line = std::str::from_utf8(&bytes[pos..end])
            .map_err(|_| ckpt_err("manifest is not ASCII"))?
            .to_string();
        pos = end + 1;
        if let Some(rest) = line.strip_prefix("blob ") {
            blob_len = Some(
                rest.trim()
                    .parse()
                    .map_err(|_| ckpt_err("bad blob length"))?,
            );
            break;
        }
        lines.push(line);
    }
    let blob_len = blob_len.ok_or_else(|| ckpt_err("missing blob line"))?;
    let blob = &bytes[pos..];
    if blob.len() != blob_len {
        return Err(ckpt_err(format!(
            "blob holds {} bytes, manifest declares {blob_len}",
            blob.len()
        )));
    }

    let mut it = lines.iter();
    let head = it.next().ok_or_else(|| ckpt_err("empty manifest"))?;
    if head != &format!("{CKPT_MAGIC} {CKPT_VERSION}") {
        return Err(ckpt_err(format!("bad header line '{head}'")));
    }
    let mut kv = |key: &str| -> Result<String> {
        let line = it
            .next()
            .ok_or_else(|| ckpt_err(format!("missing '{key}' line")))?;
        line.strip_prefix(&format!("{key} "))
            .map(str::to_string)
            .ok_or_else(|| ckpt_err(format!("expected '{key} ...', found '{line}'")))
    };
    let parse_usize = |s: String, key: &str| -> Result<usize> {
        s.trim()
            .parse()
            .map_err(|_| ckpt_err(format!("bad {key} value '{s}'")))
    };
    let parse_flag = |s: String, key: &str| -> Result<bool> {
        match s.trim() {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(ckpt_err(format!("bad {key} flag '{other}'"))),
        }
    };
    let cfg = ModelConfig {
        d: parse_usize(kv("d")?, "d")?,
        g: parse_usize(kv("g")?, "g")?,
        c: parse_usize(kv("c")?, "c")?,
        n_views: parse_usize(kv("views")?, "views")?,
        variant: kv("variant")?.trim().parse()?,
        upsample: kv("upsample")?.trim().parse()?,
        with_positional: parse_flag(kv("pos_enc")?, "pos_enc")?,
        with_angular: parse_flag(kv("ang_enc")?, "ang_enc")?,
    };
    let n_params = parse_usize(kv("params")?, "params")?;

    let specs = ConvGlr::new(&cfg)?.param_specs();
    if n_params != specs.len() {
        return Err(ckpt_err(format!(
            "{n_params} params declared, config needs {}",
            specs.len()
        )));
    }

    let mut params = ParamSet::new();
    let mut expect_offset = 0usize;
    for spec in &specs {
        let line = it
            .next()
            .ok_or_else(|| ckpt_err(format!("missing param line for '{}'", spec.name)))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 5 || toks[0] != "param" {
            return Err(ckpt_err(format!("bad param line '{line}'")));
        }
        if toks[1] != spec.name {
            return Err(ckpt_err(format!(
                "param '{}' out of order, expected '{}'",
                toks[1], spec.name
            )));
        }
        if toks[2] != "f32" {
            return Err(ckpt_err(format!("unsupported dtype '{}'", toks[2])));
        }
        let rank: usize = toks[3]
            .parse()
            .map_err(|_| ckpt_err(format!("bad rank in '{line}'")))?;
        if toks.len() != 5 + rank {
            return Err(ckpt_err(format!(
                "param line token count mismatch: '{line}'"
            )));
        }
        let dims: Vec<usize> = toks[4..4 + rank]
            .iter()
            .map(|t| {
                t.parse()
                    .map_err(|_| ckpt_err(format!("bad dim in '{line}'")))
            })
            .collect::<Result<_>>()?;
        if dims != spec.dims {
            return Err(ckpt_err(format!(
                "param '{}' has dims {dims:?}, config needs {:?}",
                spec.name, spec.dims
            )));
        }
        let offset: usize = toks[4 + rank]
            .parse()
            .map_err(|_| ckpt_err(format!("bad offset in '{line}'")))?;
        if offset != expect_offset {
            return Err(ckpt_err(format!(
                "param '{}' at offset {offset}, expected {expect_offset}",
                spec.name
            )));
        }
        let nbytes = container::tensor_nbytes(&dims);
        if offset + nbytes > blob.len() {
            return Err(ckpt_err(format!("param '{}' overruns the blob", spec.name)));
        }
        let t = container::read_tensor(&mut Cursor::new(&blob[offset..offset + nbytes]))?;
        params.insert(&spec.name, t)?;
        expect_offset = offset + nbytes;
    }
    if it.next().is_some() {
        return Err(ckpt_err("trailing manifest lines after params"));
    }
    if expect_offset != blob.len() {
        return Err(ckpt_err("blob holds bytes no param claims"));
    }
    Ok(Weights { cfg, params })
}
