//! Procedural test scenes with an analytic renderer, image metrics, and the
//! on-disk scene format (camera text, bounds text, binary PPM images).
//!
//! Scenes are stacks of fronto-parallel textured planes in the world frame
//! (the frame of camera 0). Textures are band-limited sinusoid products, so a
//! ray hit evaluates the exact color with no resampling: rendered images are
//! ground truth to round-off, which makes them usable as oracles.

use std::fmt::Write as _;
use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::camera::{
    invert_intrinsics, parse_bounds_text, parse_cameras_text, write_bounds_text,
    write_cameras_text, Camera,
};
use crate::psv::ImageBuffer;
use crate::{GlrError, Result};

/// One sinusoid product: per-channel amplitude, two frequencies, two phases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureTerm {
    pub amp: [f64; 3],
    pub w1: f64,
    pub w2: f64,
    pub p1: f64,
    pub p2: f64,
}

/// Sum of sinusoid terms around mid-gray, clamped to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureSpec {
    pub terms: [TextureTerm; 2],
}

impl TextureSpec {
    /// Exact color at plane-local coordinates, computed in f64.
    pub fn value(&self, x: f64, y: f64) -> [f32; 3] {
        let mut c = [0.5f64; 3];
        for t in &self.terms {
            let s = (t.w1 * x + t.p1).sin() * (t.w2 * y + t.p2).sin();
            for ch in 0..3 {
                c[ch] += t.amp[ch] * s;
            }
        }
        c.map(|v| v.clamp(0.0, 1.0) as f32)
    }
}

/// Axis-aligned textured rectangle on the plane z = depth (world frame).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenePlane {
    pub depth: f64,
    pub center_x: f64,
    pub center_y: f64,
    pub half_x: f64,
    pub half_y: f64,
    pub texture: TextureSpec,
}

/// Generator inputs recorded so a scene directory can be reproduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneMeta {
    pub seed: u64,
    pub n_planes: usize,
    pub rig_size: usize,
}

/// A camera rig around a stack of opaque planes, nearest plane first.
#[derive(Debug, Clone)]
pub struct Scene {
    pub planes: Vec<ScenePlane>,
    pub cameras: Vec<Camera>,
    pub near: f64,
    pub far: f64,
    pub background: [f32; 3],
    pub meta: Option<SceneMeta>,
}

const REF_SIZE: usize = 96;
const REF_F: f64 = 110.0;
const SCENE_NEAR: f64 = 0.85;
const SCENE_FAR: f64 = 1.75;
const LOOK_AT_Z: f64 = 1.32;

/// Deterministic scene synthesis: a fronto-parallel reference camera at the
/// origin plus an inward-facing ring, in front of 1 or more textured planes.
/// The deepest plane is a wall wide enough to cover every camera's frustum
/// over the depth range, so no ray escapes to the background accidentally.
pub fn generate_scene(seed: u64, n_planes: usize, rig_size: usize) -> Result<Scene> {
    if n_planes < 1 {
        return Err(GlrError::Config("need at least one plane".into()));
    }
    if rig_size < 2 {
        return Err(GlrError::Config("need at least two cameras".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut uni = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();

    let background = [
        uni(0.05, 0.25) as f32,
        uni(0.05, 0.25) as f32,
        uni(0.05, 0.25) as f32,
    ];

    let mut depths: Vec<f64> = if n_planes == 1 {
        vec![uni(1.25, 1.35)]
    } else {
        (0..n_planes)
            .map(|i| {
                let base = 1.12 + 0.46 * i as f64 / (n_planes - 1) as f64;
                base + uni(-0.02, 0.02)
            })
            .collect()
    };
    depths.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut planes = Vec::with_capacity(n_planes);
    for (i, &depth) in depths.iter().enumerate() {
        let wall = i == n_planes - 1;
        let (center_x, center_y, half_x, half_y) = if wall {
            (0.0, 0.0, 1.3, 1.3)
        } else {
            (
                uni(-0.25, 0.25),
                uni(-0.25, 0.25),
                uni(0.22, 0.55),
                uni(0.22, 0.55),
            )
        };
        // Frequencies are drawn in cycles per reference pixel at the plane's
        // own depth, then converted to world units. The 0.38 rad/px cap keeps
        // bilinear-resampling error well below the sweep focus signal.
        let term = |rng_uni: &mut dyn FnMut(f64, f64) -> f64| TextureTerm {
            w1: rng_uni(0.18, 0.38) * REF_F / depth,
            w2: rng_uni(0.18, 0.38) * REF_F / depth,
            p1: rng_uni(0.0, std::f64::consts::TAU),
            p2: rng_uni(0.0, std::f64::consts::TAU),
            amp: [
                rng_uni(0.06, 0.22),
                rng_uni(0.06, 0.22),
                rng_uni(0.06, 0.22),
            ],
        };
        let texture = TextureSpec {
            terms: [term(&mut uni), term(&mut uni)],
        };
        planes.push(ScenePlane {
            depth,
            center_x,
            center_y,
            half_x,
            half_y,
            texture,
        });
    }

    let k = Matrix3::new(
        REF_F,
        0.0,
        (REF_SIZE as f64 - 1.0) / 2.0,
        0.0,
        REF_F,
        (REF_SIZE as f64 - 1.0) / 2.0,
        0.0,
        0.0,
        1.0,
    );
    let mut cameras = vec![Camera::new(
        k,
        Matrix3::identity(),
        Vector3::zeros(),
        REF_SIZE,
        REF_SIZE,
    )?];
    let look = Vector3::new(0.0, 0.0, LOOK_AT_Z);
    for i in 1..rig_size {
        let theta =
            std::f64::consts::TAU * (i - 1) as f64 / (rig_size - 1) as f64 + uni(-0.08, 0.08);
        let rho = uni(0.15, 0.20);
        let c = Vector3::new(rho * theta.cos(), rho * theta.sin(), uni(-0.02, 0.02));
        let zc = (look - c).normalize();
        let xc = Vector3::new(0.0, 1.0, 0.0).cross(&zc).normalize();
        let yc = zc.cross(&xc);
        let r = Matrix3::new(xc.x, xc.y, xc.z, yc.x, yc.y, yc.z, zc.x, zc.y, zc.z);
        cameras.push(Camera::new(k, r, -r * c, REF_SIZE, REF_SIZE)?);
    }

    Ok(Scene {
        planes,
        cameras,
        near: SCENE_NEAR,
        far: SCENE_FAR,
        background,
        meta: Some(SceneMeta {
            seed,
            n_planes,
            rig_size,
        }),
    })
}

/// Exact renderer: per pixel, cast the ray and keep the nearest plane hit
/// (smallest positive ray parameter), evaluating the texture analytically at
/// the hit point. Rays that miss every plane get the background color.
pub fn render_ground_truth(scene: &Scene, cam: &Camera) -> ImageBuffer {
    let k_inv = invert_intrinsics(&cam.k);
    let r_t = cam.r.transpose();
    let origin = cam.center();
    let mut img = ImageBuffer::zeros(3, cam.height, cam.width);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let dir = r_t * (k_inv * Vector3::new(x as f64, y as f64, 1.0));
            let mut best_s = f64::INFINITY;
            let mut color = scene.background;
            for p in &scene.planes {
                if dir.z.abs() < 1e-15 {
                    continue;
                }
                let s = (p.depth - origin.z) / dir.z;
                if s <= 1e-9 || s >= best_s {
                    continue;
                }
                let hx = origin.x + s * dir.x - p.center_x;
                let hy = origin.y + s * dir.y - p.center_y;
                if hx.abs() <= p.half_x && hy.abs() <= p.half_y {
                    best_s = s;
                    color = p.texture.value(hx, hy);
                }
            }
            for ch in 0..3 {
                img.set(ch, y, x, color[ch]);
            }
        }
    }
    img
}

fn check_same_shape(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if a.channels() != b.channels() || a.height() != b.height() || a.width() != b.width() {
        return Err(GlrError::Shape(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            a.channels(),
            a.height(),
            a.width(),
            b.channels(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for unit-range images, capped at 99.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_same_shape(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(99.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(99.0))
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_kernel() -> [f64; SSIM_WIN * SSIM_WIN] {
    let mut w = [0.0; SSIM_WIN * SSIM_WIN];
    let c = (SSIM_WIN / 2) as f64;
    let mut total = 0.0;
    for i in 0..SSIM_WIN {
        for j in 0..SSIM_WIN {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[i * SSIM_WIN + j] = v;
            total += v;
        }
    }
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Mean structural similarity over Gaussian-weighted 11x11 windows (sigma
/// 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1), averaged across channels.
/// Only fully interior windows count. Identical images score exactly 1.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_same_shape(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(GlrError::Shape(format!(
            "ssim needs at least {SSIM_WIN}x{SSIM_WIN} images, got {h}x{w}"
        )));
    }
    let kern = ssim_kernel();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut channel_sum = 0.0;
    for ch in 0..a.channels() {
        let pa = a.plane(ch);
        let pb = b.plane(ch);
        let mut total = 0.0;
        for y0 in 0..=(h - SSIM_WIN) {
            for x0 in 0..=(w - SSIM_WIN) {
                let (mut ma, mut mb) = (0.0f64, 0.0f64);
                let (mut saa, mut sbb, mut sab) = (0.0f64, 0.0f64, 0.0f64);
                for i in 0..SSIM_WIN {
                    for j in 0..SSIM_WIN {
                        let wt = kern[i * SSIM_WIN + j];
                        let va = pa[(y0 + i) * w + x0 + j] as f64;
                        let vb = pb[(y0 + i) * w + x0 + j] as f64;
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let (va, vb, vab) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * vab + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
        channel_sum += total / (((h - SSIM_WIN + 1) * (w - SSIM_WIN + 1)) as f64);
    }
    Ok(channel_sum / a.channels() as f64)
}

/// Writes a 3-channel image as binary PPM (P6, maxval 255), rounding unit-
/// range floats to 8 bits.
pub fn write_ppm(path: &Path, img: &ImageBuffer) -> Result<()> {
    if img.channels() != 3 {
        return Err(GlrError::Shape(format!(
            "ppm needs 3 channels, got {}",
            img.channels()
        )));
    }
    let (h, w) = (img.height(), img.width());
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                bytes.push((img.get(ch, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn ppm_err(msg: impl Into<String>) -> GlrError {
    GlrError::Format(format!("ppm: {}", msg.into()))
}

/// Parses binary PPM bytes. Header comments (`#` to end of line) are allowed;
/// maxval must be 255; trailing bytes after the raster are rejected.
pub fn parse_ppm(bytes: &[u8]) -> Result<ImageBuffer> {
    // Header tokens are whitespace separated; exactly one whitespace byte
    // follows the maxval before the raster.
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(ppm_err("truncated header")),
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        Ok(std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| ppm_err("non-ASCII header"))?
            .to_string())
    };
    let magic = token()?;
    if magic != "P6" {
        return Err(ppm_err(format!("expected P6, got '{magic}'")));
    }
    let dim = |t: String, what: &str| -> Result<usize> {
        t.parse::<usize>()
            .ok()
            .filter(|&v| v >= 1)
            .ok_or_else(|| ppm_err(format!("bad {what} '{t}'")))
    };
    let w = dim(token()?, "width")?;
    let h = dim(token()?, "height")?;
    let maxval = token()?;
    if maxval != "255" {
        return Err(ppm_err(format!("unsupported maxval '{maxval}'")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(ppm_err("missing whitespace after maxval")),
    }
    let raster = &bytes[pos..];
    if raster.len() != 3 * w * h {
        return Err(ppm_err(format!(
            "raster holds {} bytes, {}x{} needs {}",
            raster.len(),
            w,
            h,
            3 * w * h
        )));
    }
    let mut img = ImageBuffer::zeros(3, h, w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = raster[(y * w + x) * 3 + ch] as f32 / 255.0;
                img.set(ch, y, x, v);
            }
        }
    }
    Ok(img)
}

pub fn read_ppm(path: &Path) -> Result<ImageBuffer> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == ErrorKind::NotFound {
            GlrError::MissingFile(path.display().to_string())
        } else {
            GlrError::Io(e)
        }
    })?;
    parse_ppm(&bytes)
}

/// One posed view with its rendered image.
#[derive(Debug, Clone)]
pub struct SceneView {
    pub id: usize,
    pub camera: Camera,
    pub image: ImageBuffer,
}

/// Everything a scene directory holds: posed images plus the depth bounds.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub views: Vec<SceneView>,
    pub near: f64,
    pub far: f64,
    pub meta: Option<SceneMeta>,
}

impl SceneData {
    pub fn view_by_id(&self, id: usize) -> Result<&SceneView> {
        self.views
            .iter()
            .find(|v| v.id == id)
            .ok_or_else(|| GlrError::Config(format!("scene has no view {id}")))
    }
}

fn meta_to_text(m: &SceneMeta) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "version 1");
    let _ = writeln!(s, "seed {}", m.seed);
    let _ = writeln!(s, "planes {}", m.n_planes);
    let _ = writeln!(s, "rig {}", m.rig_size);
    s
}

fn parse_meta_text(text: &str) -> Result<SceneMeta> {
    let (mut seed, mut planes, mut rig, mut version) = (None, None, None, None);
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| GlrError::Parse { line: i + 1, msg };
        let (key, val) = line
            .split_once(' ')
            .ok_or_else(|| err(format!("expected 'key value', found '{line}'")))?;
        let slot = match key {
            "version" => &mut version,
            "seed" => &mut seed,
            "planes" => &mut planes,
            "rig" => &mut rig,
            other => return Err(err(format!("unknown meta key '{other}'"))),
        };
        if slot.is_some() {
            return Err(err(format!("duplicate meta key '{key}'")));
        }
        *slot = Some(
            val.trim()
                .parse::<u64>()
                .map_err(|_| err(format!("bad value '{val}'")))?,
        );
    }
    match (version, seed, planes, rig) {
        (Some(1), Some(seed), Some(p), Some(r)) => Ok(SceneMeta {
            seed,
            n_planes: p as usize,
            rig_size: r as usize,
        }),
        (Some(v), ..) if v != 1 => Err(GlrError::Format(format!("unsupported meta version {v}"))),
        _ => Err(GlrError::Format("meta.txt is missing required keys".into())),
    }
}

/// Writes posed images, cameras, and bounds in the scene directory layout.
pub fn save_scene_data(dir: &Path, data: &SceneData) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    let cams: Vec<(usize, Camera)> = data
        .views
        .iter()
        .map(|v| (v.id, v.camera.clone()))
        .collect();
    fs::write(dir.join("cameras.txt"), write_cameras_text(&cams))?;
    fs::write(
        dir.join("bounds.txt"),
        write_bounds_text(data.near, data.far),
    )?;
    for v in &data.views {
        write_ppm(
            &dir.join("images").join(format!("view_{}.ppm", v.id)),
            &v.image,
        )?;
    }
    if let Some(m) = &data.meta {
        fs::write(dir.join("meta.txt"), meta_to_text(m))?;
    }
    Ok(())
}

/// Renders every camera of a scene and saves the result as a scene directory.
pub fn save_scene(scene: &Scene, dir: &Path) -> Result<()> {
    let views = scene
        .cameras
        .iter()
        .enumerate()
        .map(|(id, cam)| SceneView {
            id,
            camera: cam.clone(),
            image: render_ground_truth(scene, cam),
        })
        .collect();
    save_scene_data(
        dir,
        &SceneData {
            views,
            near: scene.near,
            far: scene.far,
            meta: scene.meta,
        },
    )
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        if e.kind() == ErrorKind::NotFound {
            GlrError::MissingFile(path.display().to_string())
        } else {
            GlrError::Io(e)
        }
    })
}

/// Loads a scene directory, validating that every camera has a matching
/// image of the right size. `meta.txt` is optional.
pub fn load_scene(dir: &Path) -> Result<SceneData> {
    let cams = parse_cameras_text(&read_text(&dir.join("cameras.txt"))?)?;
    let (near, far) = parse_bounds_text(&read_text(&dir.join("bounds.txt"))?)?;
    let mut views = Vec::with_capacity(cams.len());
    for (id, camera) in cams {
        let image = read_ppm(&dir.join("images").join(format!("view_{id}.ppm")))?;
        if image.height() != camera.height || image.width() != camera.width {
            return Err(GlrError::Format(format!(
                "view {id}: image is {}x{}, camera says {}x{}",
                image.height(),
                image.width(),
                camera.height,
                camera.width
            )));
        }
        views.push(SceneView { id, camera, image });
    }
    let meta_path = dir.join("meta.txt");
    let meta = if meta_path.exists() {
        Some(parse_meta_text(&read_text(&meta_path)?)?)
    } else {
        None
    };
    Ok(SceneData {
        views,
        near,
        far,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psv::Rect;

    fn manual_plane(depth: f64, amp: f64, w1: f64, w2: f64) -> ScenePlane {
        let zero = TextureTerm {
            amp: [0.0; 3],
            w1: 1.0,
            w2: 1.0,
            p1: 0.0,
            p2: 0.0,
        };
        ScenePlane {
            depth,
            center_x: 0.0,
            center_y: 0.0,
            half_x: 5.0,
            half_y: 5.0,
            texture: TextureSpec {
                terms: [
                    TextureTerm {
                        amp: [amp; 3],
                        w1,
                        w2,
                        p1: std::f64::consts::FRAC_PI_2,
                        p2: std::f64::consts::FRAC_PI_2,
                    },
                    zero,
                ],
            },
        }
    }

    fn manual_camera(f: f64, size: usize) -> Camera {
        let c = (size as f64 - 1.0) / 2.0;
        let k = Matrix3::new(f, 0.0, c, 0.0, f, c, 0.0, 0.0, 1.0);
        Camera::new(k, Matrix3::identity(), Vector3::zeros(), size, size).unwrap()
    }

    #[test]
    fn generation_is_pure_in_the_seed() {
        let a = generate_scene(42, 3, 5).unwrap();
        let b = generate_scene(42, 3, 5).unwrap();
        let c = generate_scene(43, 3, 5).unwrap();
        assert_eq!(a.background, b.background);
        assert_eq!(a.planes.len(), b.planes.len());
        for (pa, pb) in a.planes.iter().zip(&b.planes) {
            assert_eq!(pa, pb);
        }
        for (ca, cb) in a.cameras.iter().zip(&b.cameras) {
            assert_eq!(ca.k, cb.k);
            assert_eq!(ca.r, cb.r);
            assert_eq!(ca.t, cb.t);
        }
        assert!(a.planes[0] != c.planes[0]);
        assert_eq!(
            a.meta,
            Some(SceneMeta {
                seed: 42,
                n_planes: 3,
                rig_size: 5
            })
        );
    }

    #[test]
    fn generated_scenes_respect_their_bounds() {
        for seed in 0..12 {
            for n in [1usize, 2, 3, 5] {
                let s = generate_scene(seed, n, 4).unwrap();
                assert_eq!(s.planes.len(), n);
                assert_eq!(s.cameras.len(), 4);
                assert!(s.cameras[0].is_canonical());
                for w in s.planes.windows(2) {
                    assert!(w[0].depth <= w[1].depth);
                }
                assert!(s.near < s.planes[0].depth);
                assert!(s.planes[n - 1].depth < s.far);
                for p in &s.planes {
                    assert!(p.half_x > 0.0 && p.half_y > 0.0);
                }
                // The deepest plane is the backdrop wall.
                assert_eq!(s.planes[n - 1].half_x, 1.3);
            }
        }
        assert!(generate_scene(0, 0, 4).is_err());
        assert!(generate_scene(0, 1, 1).is_err());
    }

    #[test]
    fn looking_away_renders_the_background() {
        let scene = generate_scene(9, 2, 3).unwrap();
        // Flip the reference camera around the y axis so it looks down -z.
        let flip = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        let c0 = &scene.cameras[0];
        let away = Camera::new(c0.k, flip, Vector3::zeros(), c0.width, c0.height).unwrap();
        let img = render_ground_truth(&scene, &away);
        for y in 0..img.height() {
            for x in 0..img.width() {
                for ch in 0..3 {
                    assert_eq!(img.get(ch, y, x), scene.background[ch]);
                }
            }
        }
    }

    #[test]
    fn on_axis_center_pixel_is_hand_computable() {
        // Principal ray hits the plane origin; with quarter-turn phases the
        // texture there is exactly 0.5 + amp.
        let scene = Scene {
            planes: vec![manual_plane(2.0, 0.25, 3.0, 5.0)],
            cameras: vec![manual_camera(100.0, 65)],
            near: 1.0,
            far: 3.0,
            background: [0.0; 3],
            meta: None,
        };
        let img = render_ground_truth(&scene, &scene.cameras[0]);
        for ch in 0..3 {
            assert_eq!(img.get(ch, 32, 32), 0.75);
        }
    }

    #[test]
    fn nearest_plane_wins_against_exhaustive_sort() {
        // Two overlapping planes seen from the front, and a camera sitting
        // between planes looking backwards, where depth order and ray order
        // disagree.
        let scene = Scene {
            planes: vec![
                manual_plane(1.0, 0.2, 2.0, 3.0),
                manual_plane(1.2, 0.15, 4.0, 2.0),
                manual_plane(1.4, 0.1, 5.0, 5.0),
            ],
            cameras: vec![manual_camera(80.0, 48)],
            near: 0.5,
            far: 2.0,
            background: [0.3, 0.1, 0.9],
            meta: None,
        };
        let front = render_ground_truth(&scene, &scene.cameras[0]);

        let flip = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        let between = Camera::new(
            scene.cameras[0].k,
            flip,
            -flip * Vector3::new(0.0, 0.0, 1.3),
            48,
            48,
        )
        .unwrap();
        let back = render_ground_truth(&scene, &between);

        for (cam, img) in [(&scene.cameras[0], &front), (&between, &back)] {
            let k_inv = invert_intrinsics(&cam.k);
            let r_t = cam.r.transpose();
            let origin = cam.center();
            for y in 0..48 {
                for x in 0..48 {
                    let dir = r_t * (k_inv * Vector3::new(x as f64, y as f64, 1.0));
                    let mut hits: Vec<(f64, [f32; 3])> = Vec::new();
                    for p in &scene.planes {
                        let s = (p.depth - origin.z) / dir.z;
                        if s <= 1e-9 {
                            continue;
                        }
                        let hx = origin.x + s * dir.x - p.center_x;
                        let hy = origin.y + s * dir.y - p.center_y;
                        if hx.abs() <= p.half_x && hy.abs() <= p.half_y {
                            hits.push((s, p.texture.value(hx, hy)));
                        }
                    }
                    hits.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                    let want = hits.first().map(|h| h.1).unwrap_or(scene.background);
                    for ch in 0..3 {
                        assert_eq!(img.get(ch, y, x), want[ch]);
                    }
                }
            }
        }
        // The backward camera's center ray must hit the depth-1.2 plane even
        // though the depth-1.0 plane has the smaller depth value: along this
        // ray the deeper-valued plane comes first.
        let k_inv = invert_intrinsics(&between.k);
        let dir = between.r.transpose() * (k_inv * Vector3::new(23.0, 23.0, 1.0));
        let origin = between.center();
        let s1 = (scene.planes[1].depth - origin.z) / dir.z;
        let s0 = (scene.planes[0].depth - origin.z) / dir.z;
        assert!(s1 > 0.0 && s0 > s1);
        let want = scene.planes[1]
            .texture
            .value(origin.x + s1 * dir.x, origin.y + s1 * dir.y);
        let other = scene.planes[0]
            .texture
            .value(origin.x + s0 * dir.x, origin.y + s0 * dir.y);
        assert!(want != other);
        for ch in 0..3 {
            assert_eq!(back.get(ch, 23, 23), want[ch]);
        }
    }

    #[test]
    fn psnr_unit_cases() {
        let a = ImageBuffer::from_data(3, 8, 8, vec![0.2; 192]).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        // Tolerances absorb the f32 rounding of the 0.1 and 0.01 offsets.
        let b = ImageBuffer::from_data(3, 8, 8, vec![0.3; 192]).unwrap();
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0).abs() < 1e-5, "{p}");
        let c = ImageBuffer::from_data(3, 8, 8, vec![0.21; 192]).unwrap();
        let p = psnr(&a, &c).unwrap();
        assert!((p - 40.0).abs() < 1e-3, "{p}");
        assert_eq!(
            psnr(&a, &b).unwrap().to_bits(),
            psnr(&b, &a).unwrap().to_bits()
        );
        let small = ImageBuffer::zeros(3, 4, 4);
        assert!(psnr(&a, &small).is_err());
    }

    #[test]
    fn ssim_unit_cases() {
        let scene = generate_scene(5, 1, 2).unwrap();
        let img = render_ground_truth(&scene, &scene.cameras[0]);
        assert_eq!(ssim(&img, &img).unwrap(), 1.0);

        let zeros = ImageBuffer::zeros(1, 16, 16);
        let ones = ImageBuffer::from_data(1, 16, 16, vec![1.0; 256]).unwrap();
        let c1 = 0.01f64 * 0.01;
        let want = c1 / (1.0 + c1);
        let got = ssim(&zeros, &ones).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert_eq!(
            ssim(&zeros, &ones).unwrap().to_bits(),
            ssim(&ones, &zeros).unwrap().to_bits()
        );

        let tiny = ImageBuffer::zeros(1, 10, 16);
        assert!(ssim(&tiny, &tiny).is_err());
    }

    #[test]
    fn metrics_strictly_decrease_with_noise() {
        use rand::Rng;
        let scene = generate_scene(11, 2, 3).unwrap();
        let base = render_ground_truth(&scene, &scene.cameras[1])
            .crop(Rect {
                x0: 20,
                y0: 20,
                width: 32,
                height: 32,
            })
            .unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let pattern: Vec<f32> = (0..base.data().len())
            .map(|_| rng.random::<f32>() * 2.0 - 1.0)
            .collect();
        let mut last_psnr = f64::INFINITY;
        let mut last_ssim = 2.0;
        for level in 1..=10 {
            let eps = 0.005 * level as f32;
            let noisy = ImageBuffer::from_data(
                3,
                32,
                32,
                base.data()
                    .iter()
                    .zip(&pattern)
                    .map(|(&v, &n)| (v + eps * n).clamp(0.0, 1.0))
                    .collect(),
            )
            .unwrap();
            let p = psnr(&base, &noisy).unwrap();
            let s = ssim(&base, &noisy).unwrap();
            assert!(p < last_psnr, "psnr {p} !< {last_psnr} at level {level}");
            assert!(s < last_ssim, "ssim {s} !< {last_ssim} at level {level}");
            last_psnr = p;
            last_ssim = s;
        }
    }

    #[test]
    fn ppm_round_trips_and_accepts_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let data: Vec<f32> = (0..3 * 9 * 7).map(|i| (i % 256) as f32 / 255.0).collect();
        let img = ImageBuffer::from_data(3, 9, 7, data).unwrap();
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(img.data(), back.data());

        let mut bytes = b"P6\n# a comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 128, 255, 10, 20, 30]);
        let small = parse_ppm(&bytes).unwrap();
        assert_eq!((small.height(), small.width()), (1, 2));
        assert_eq!(small.get(1, 0, 0), 128.0 / 255.0);
    }

    #[test]
    fn ppm_rejects_malformed_input() {
        let good_header = b"P6\n2 2\n255\n";
        let mut good = good_header.to_vec();
        good.extend_from_slice(&[0u8; 12]);
        assert!(parse_ppm(&good).is_ok());

        assert!(matches!(
            parse_ppm(b"P5\n2 2\n255\n"),
            Err(GlrError::Format(_))
        ));
        assert!(matches!(
            parse_ppm(b"P6\n2 2\n65535\n"),
            Err(GlrError::Format(_))
        ));
        assert!(matches!(
            parse_ppm(&good[..good.len() - 1]),
            Err(GlrError::Format(_))
        ));
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(parse_ppm(&trailing), Err(GlrError::Format(_))));
        assert!(matches!(
            parse_ppm(b"P6\n0 2\n255\n"),
            Err(GlrError::Format(_))
        ));
    }

    #[test]
    fn scene_directory_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let scene = generate_scene(7, 3, 4).unwrap();
        save_scene(&scene, dir.path()).unwrap();
        let data = load_scene(dir.path()).unwrap();
        assert_eq!(data.views.len(), 4);
        assert_eq!(data.near, scene.near);
        assert_eq!(data.far, scene.far);
        assert_eq!(data.meta, scene.meta);
        for (i, v) in data.views.iter().enumerate() {
            assert_eq!(v.id, i);
            assert_eq!(v.camera.k, scene.cameras[i].k);
            assert_eq!(v.camera.r, scene.cameras[i].r);
            assert_eq!(v.camera.t, scene.cameras[i].t);
            // Loading quantized bytes then re-quantizing is lossless.
            let rendered = render_ground_truth(&scene, &scene.cameras[i]);
            for (got, want) in v.image.data().iter().zip(rendered.data()) {
                let q = (want.clamp(0.0, 1.0) * 255.0).round() / 255.0;
                assert_eq!(*got, q);
            }
        }

        // Saving what was loaded reproduces every file byte for byte.
        let dir2 = tempfile::tempdir().unwrap();
        save_scene_data(dir2.path(), &data).unwrap();
        for name in ["cameras.txt", "bounds.txt", "meta.txt"] {
            assert_eq!(
                fs::read(dir.path().join(name)).unwrap(),
                fs::read(dir2.path().join(name)).unwrap(),
                "{name}"
            );
        }
        for i in 0..4 {
            let rel = format!("images/view_{i}.ppm");
            assert_eq!(
                fs::read(dir.path().join(&rel)).unwrap(),
                fs::read(dir2.path().join(&rel)).unwrap()
            );
        }
    }

    #[test]
    fn missing_files_are_reported_explicitly() {
        let dir = tempfile::tempdir().unwrap();
        let scene = generate_scene(3, 1, 2).unwrap();
        save_scene(&scene, dir.path()).unwrap();
        fs::remove_file(dir.path().join("bounds.txt")).unwrap();
        match load_scene(dir.path()) {
            Err(GlrError::MissingFile(p)) => assert!(p.contains("bounds.txt")),
            other => panic!("expected MissingFile, got {other:?}"),
        }

        save_scene(&scene, dir.path()).unwrap();
        fs::remove_file(dir.path().join("images/view_1.ppm")).unwrap();
        assert!(matches!(
            load_scene(dir.path()),
            Err(GlrError::MissingFile(_))
        ));
    }

    /// Rendering at 2x resolution and area-averaging 2x2 blocks must agree
    /// with direct rendering: the four fine samples sit at +-0.25 coarse
    /// pixels around each center, so the averaging error is bounded by the
    /// texture's second derivative, about 0.5 * 0.0625 * amp * (w1+w2)^2 in
    /// pixel units, well under 0.02 for the generator's frequency cap.
    #[test]
    fn renderer_is_resolution_consistent() {
        let scene = generate_scene(13, 1, 2).unwrap();
        let coarse = render_ground_truth(&scene, &scene.cameras[0]);

        let c0 = &scene.cameras[0];
        let k2 = Matrix3::new(
            2.0 * REF_F,
            0.0,
            2.0 * c0.k[(0, 2)] + 0.5,
            0.0,
            2.0 * REF_F,
            2.0 * c0.k[(1, 2)] + 0.5,
            0.0,
            0.0,
            1.0,
        );
        let fine_cam = Camera::new(k2, c0.r, c0.t, 2 * c0.width, 2 * c0.height).unwrap();
        let fine = render_ground_truth(&scene, &fine_cam);

        let mut max_diff = 0.0f64;
        for y in 0..coarse.height() {
            for x in 0..coarse.width() {
                for ch in 0..3 {
                    let avg = (fine.get(ch, 2 * y, 2 * x) as f64
                        + fine.get(ch, 2 * y, 2 * x + 1) as f64
                        + fine.get(ch, 2 * y + 1, 2 * x) as f64
                        + fine.get(ch, 2 * y + 1, 2 * x + 1) as f64)
                        / 4.0;
                    max_diff = max_diff.max((avg - coarse.get(ch, y, x) as f64).abs());
                }
            }
        }
        assert!(max_diff < 0.02, "max diff {max_diff}");
    }

    #[test]
    fn meta_text_is_strict() {
        let m = SceneMeta {
            seed: 9,
            n_planes: 2,
            rig_size: 6,
        };
        assert_eq!(parse_meta_text(&meta_to_text(&m)).unwrap(), m);
        assert!(matches!(
            parse_meta_text("version 1\nseed 1\nplanes 1\nrig 2\nwhat 3\n"),
            Err(GlrError::Parse { line: 5, .. })
        ));
        assert!(parse_meta_text("version 2\nseed 1\nplanes 1\nrig 2\n").is_err());
        assert!(parse_meta_text("seed 1\n").is_err());
    }
}
