//! Pinhole cameras and the geometry that drives plane sweeps.
//!
//! Conventions, used everywhere in the crate:
//! - extrinsics map world to camera: `x_cam = R * X + t`;
//! - pixels come from the intrinsic matrix: `(u, v) = dehomog(K * x_cam)`;
//! - the optical center in world coordinates is `C = -R^T * t`;
//! - sweep planes are fronto-parallel in the *target* frame: `z = a_d` with
//!   unit normal `+z`.
//!
//! Pose-dependent operations ([`plane_homography`], [`fundamental_matrix`],
//! [`unproject_project_oracle`], [`angular_encoding`]) expect view cameras
//! expressed relative to a canonical target (`R = I`, `t = 0`); run
//! [`normalize_to_target`] first.

use nalgebra::{Matrix3, Vector3};

use crate::{GlrError, Result};

/// Calibrated pinhole camera with integer image size.
#[derive(Debug, Clone)]
pub struct Camera {
    /// Intrinsics; upper-triangular with last row `(0, 0, 1)`.
    pub k: Matrix3<f64>,
    /// World-to-camera rotation.
    pub r: Matrix3<f64>,
    /// World-to-camera translation.
    pub t: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Validating constructor: finite entries, `fx, fy > 0`, pinhole bottom
    /// row, orthonormal right-handed `R`, nonzero image size.
    pub fn new(
        k: Matrix3<f64>,
        r: Matrix3<f64>,
        t: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Camera> {
        if width == 0 || height == 0 {
            return Err(GlrError::InvalidCamera(format!(
                "image size {width}x{height} must be at least 1x1"
            )));
        }
        if k.iter()
            .chain(r.iter())
            .chain(t.iter())
            .any(|v| !v.is_finite())
        {
            return Err(GlrError::InvalidCamera(
                "non-finite entry in K, R, or t".into(),
            ));
        }
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return Err(GlrError::InvalidCamera(format!(
                "focal lengths must be positive, got fx={} fy={}",
                k[(0, 0)],
                k[(1, 1)]
            )));
        }
        let bottom_ok = k[(1, 0)].abs() < 1e-12
            && k[(2, 0)].abs() < 1e-12
            && k[(2, 1)].abs() < 1e-12
            && (k[(2, 2)] - 1.0).abs() < 1e-12;
        if !bottom_ok {
            return Err(GlrError::InvalidCamera(
                "K must be upper-triangular with bottom row (0, 0, 1)".into(),
            ));
        }
        let gram = r.transpose() * r;
        let ortho_err = (gram - Matrix3::identity()).abs().max();
        if ortho_err >= 1e-9 {
            return Err(GlrError::InvalidCamera(format!(
                "R is not orthonormal: |R^T R - I| = {ortho_err:.3e}"
            )));
        }
        if r.determinant() <= 0.0 {
            return Err(GlrError::InvalidCamera(
                "R must be right-handed (det > 0)".into(),
            ));
        }
        Ok(Camera {
            k,
            r,
            t,
            width,
            height,
        })
    }

    /// True for the reference pose `R = I`, `t = 0`.
    pub fn is_canonical(&self) -> bool {
        (self.r - Matrix3::identity()).abs().max() < 1e-12 && self.t.abs().max() < 1e-12
    }

    /// Optical center in world coordinates, `C = -R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.r.transpose() * self.t)
    }

    /// Projects a world point to pixel coordinates.
    ///
    /// Points at or behind the principal plane (`z_cam <= 0`) have no image.
    pub fn project(&self, x: &Vector3<f64>) -> Result<(f64, f64)> {
        let q = self.k * (self.r * x + self.t);
        if !q.z.is_finite() {
            return Err(GlrError::NonFinite(
                "projection produced a non-finite depth".into(),
            ));
        }
        if q.z <= 0.0 {
            return Err(GlrError::BehindCamera(format!("camera depth {}", q.z)));
        }
        Ok((q.x / q.z, q.y / q.z))
    }
}

/// Optical center in world coordinates, `C = -R^T t`.
pub fn camera_center(cam: &Camera) -> Vector3<f64> {
    cam.center()
}

/// Re-expresses every camera relative to `target`, which becomes canonical.
///
/// For each view, `R' = R_v R_*^T` and `t' = t_v - R' t_*`; projections of any
/// world point are unchanged. Returns the rewritten views and the canonical
/// target.
pub fn normalize_to_target(cameras: &[Camera], target: &Camera) -> (Vec<Camera>, Camera) {
    let rt = target.r.transpose();
    let views = cameras
        .iter()
        .map(|c| {
            let r = c.r * rt;
            Camera {
                k: c.k,
                r,
                t: c.t - r * target.t,
                width: c.width,
                height: c.height,
            }
        })
        .collect();
    let canon = Camera {
        k: target.k,
        r: Matrix3::identity(),
        t: Vector3::zeros(),
        width: target.width,
        height: target.height,
    };
    (views, canon)
}

/// How plane distances are spaced between the near and far bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthSampling {
    /// Even steps in depth.
    Depth,
    /// Even steps in inverse depth; denser near the camera.
    Disparity,
}

impl std::fmt::Display for DepthSampling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DepthSampling::Depth => "depth",
            DepthSampling::Disparity => "disparity",
        })
    }
}

impl std::str::FromStr for DepthSampling {
    type Err = GlrError;

    fn from_str(s: &str) -> Result<DepthSampling> {
        match s {
            "depth" => Ok(DepthSampling::Depth),
            "disparity" => Ok(DepthSampling::Disparity),
            other => Err(GlrError::Config(format!(
                "unknown depth sampling '{other}' (expected 'depth' or 'disparity')"
            ))),
        }
    }
}

/// Sweep plane distances in the target frame, strictly increasing.
#[derive(Debug, Clone)]
pub struct DepthPlanes {
    pub distances: Vec<f64>,
    pub mode: DepthSampling,
}

impl DepthPlanes {
    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }

    /// Shared unit normal of the fronto-parallel sweep planes.
    pub fn normal(&self) -> Vector3<f64> {
        Vector3::z()
    }
}

/// Places `count` plane distances over `[near, far]`, endpoints included
/// exactly, spaced evenly in depth or inverse depth.
pub fn sample_depths(
    near: f64,
    far: f64,
    count: usize,
    mode: DepthSampling,
) -> Result<DepthPlanes> {
    if !near.is_finite() || !far.is_finite() || near <= 0.0 || far <= near {
        return Err(GlrError::Bounds(format!(
            "need 0 < near < far, got near={near} far={far}"
        )));
    }
    if count < 2 {
        return Err(GlrError::Bounds(format!(
            "need at least 2 depth planes to span [near, far], got {count}"
        )));
    }
    let mut distances = Vec::with_capacity(count);
    let steps = (count - 1) as f64;
    for i in 0..count {
        let w = i as f64 / steps;
        let a = match mode {
            DepthSampling::Depth => near + (far - near) * w,
            DepthSampling::Disparity => 1.0 / ((1.0 - w) / near + w / far),
        };
        distances.push(a);
    }
    distances[0] = near;
    distances[count - 1] = far;
    if distances.windows(2).any(|p| p[1] <= p[0]) {
        return Err(GlrError::Bounds(format!(
            "depth samples are not strictly increasing over [{near}, {far}]"
        )));
    }
    Ok(DepthPlanes { distances, mode })
}

/// Inverse of a validated pinhole intrinsic matrix, computed in closed form so
/// the bottom row stays exactly `(0, 0, 1)`.
pub fn invert_intrinsics(k: &Matrix3<f64>) -> Matrix3<f64> {
    let (fx, s, cx) = (k[(0, 0)], k[(0, 1)], k[(0, 2)]);
    let (fy, cy) = (k[(1, 1)], k[(1, 2)]);
    Matrix3::new(
        1.0 / fx,
        -s / (fx * fy),
        (s * cy - cx * fy) / (fx * fy),
        0.0,
        1.0 / fy,
        -cy / fy,
        0.0,
        0.0,
        1.0,
    )
}

fn require_canonical(target: &Camera, what: &str) -> Result<()> {
    if !target.is_canonical() {
        return Err(GlrError::InvalidCamera(format!(
            "{what} expects a canonical target (R = I, t = 0); run normalize_to_target first"
        )));
    }
    Ok(())
}

fn require_positive_depth(a_d: f64) -> Result<()> {
    if !a_d.is_finite() || a_d <= 0.0 {
        return Err(GlrError::Bounds(format!(
            "plane distance must be positive, got {a_d}"
        )));
    }
    Ok(())
}

/// Homography that maps target pixels to `view` pixels through the plane
/// `z = a_d` in the target frame:
///
/// ```text
/// H = K_v (R_v + t_v n^T / a_d) K_*^{-1},    n = (0, 0, 1)
/// ```
///
/// A view that coincides with the target (`R = I`, `t = 0`, same `K`) yields
/// the exact identity matrix, so resampling through it is lossless.
pub fn plane_homography(view: &Camera, target: &Camera, a_d: f64) -> Result<Matrix3<f64>> {
    require_canonical(target, "plane_homography")?;
    require_positive_depth(a_d)?;
    if view.is_canonical() && view.k == target.k {
        return Ok(Matrix3::identity());
    }
    let mut m = view.r;
    m.set_column(2, &(view.r.column(2) + view.t / a_d));
    Ok(view.k * m * invert_intrinsics(&target.k))
}

/// Reference implementation of the same mapping as [`plane_homography`],
/// built from first principles: lift the target pixel onto the plane
/// `z = a_d`, then project the 3D point into the view.
///
/// Kept separate so the closed-form homography can be checked against it.
pub fn unproject_project_oracle(
    view: &Camera,
    target: &Camera,
    a_d: f64,
    pixel: (f64, f64),
) -> Result<(f64, f64)> {
    require_canonical(target, "unproject_project_oracle")?;
    require_positive_depth(a_d)?;
    let ray = invert_intrinsics(&target.k) * Vector3::new(pixel.0, pixel.1, 1.0);
    let x = ray * (a_d / ray.z);
    view.project(&x)
}

/// Cosine between the plane normal and the direction from the view's optical
/// center to the plane anchor `(0, 0, a_d)` in the target frame. Equals 1 for
/// a view at the target position and shrinks as the baseline grows.
pub fn angular_encoding(view: &Camera, a_d: f64) -> Result<f64> {
    require_positive_depth(a_d)?;
    let u = Vector3::new(0.0, 0.0, a_d) - view.center();
    let n = u.norm();
    if n < 1e-12 {
        return Err(GlrError::Degenerate(
            "view center coincides with the plane anchor".into(),
        ));
    }
    Ok(u.z / n)
}

/// Fundamental matrix mapping target pixels to epipolar lines in the view,
/// `l_v = F x_*`, scaled to unit Frobenius norm:
///
/// ```text
/// F = K_v^{-T} [t_v]_x R_v K_*^{-1}
/// ```
///
/// Fails for a pure rotation (no baseline, epipolar geometry undefined).
pub fn fundamental_matrix(view: &Camera, target: &Camera) -> Result<Matrix3<f64>> {
    require_canonical(target, "fundamental_matrix")?;
    let t = view.t;
    if t.norm() < 1e-12 {
        return Err(GlrError::Degenerate(
            "zero baseline: fundamental matrix undefined for pure rotation".into(),
        ));
    }
    let tx = Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0);
    let f = invert_intrinsics(&view.k).transpose() * tx * view.r * invert_intrinsics(&target.k);
    let norm = f.norm();
    if norm < 1e-300 {
        return Err(GlrError::Degenerate("fundamental matrix vanished".into()));
    }
    Ok(f / norm)
}

fn fmt_floats(out: &mut String, values: &[f64]) {
    use std::fmt::Write;
    for v in values {
        write!(out, " {v}").unwrap();
    }
    out.push('\n');
}

/// Serializes `(id, camera)` pairs to the camera text format:
///
/// ```text
/// view <id>
/// size <width> <height>
/// K <9 row-major floats>
/// R <9 row-major floats>
/// t <3 floats>
/// ```
///
/// Blocks are separated by blank lines. Floats use the shortest
/// round-trippable decimal form, so parsing restores them bit-exactly.
pub fn write_cameras_text(cams: &[(usize, Camera)]) -> String {
    let mut out = String::new();
    for (i, (id, c)) in cams.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&format!("view {id}\n"));
        out.push_str(&format!("size {} {}\n", c.width, c.height));
        out.push_str("K");
        fmt_floats(&mut out, c.k.transpose().as_slice());
        out.push_str("R");
        fmt_floats(&mut out, c.r.transpose().as_slice());
        out.push_str("t");
        fmt_floats(&mut out, c.t.as_slice());
    }
    out
}

/// Lines paired with their 1-based position, blanks and `#` comments removed.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_err(line: usize, msg: impl Into<String>) -> GlrError {
    GlrError::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_floats(line: usize, tokens: &[&str], want: usize, key: &str) -> Result<Vec<f64>> {
    if tokens.len() != want {
        return Err(parse_err(
            line,
            format!("{key} expects {want} numbers, got {}", tokens.len()),
        ));
    }
    tokens
        .iter()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| parse_err(line, format!("bad float '{t}' in {key}")))
        })
        .collect()
}

/// Parses the format written by [`write_cameras_text`]. View ids must be
/// unique; block order is preserved.
pub fn parse_cameras_text(text: &str) -> Result<Vec<(usize, Camera)>> {
    let mut lines = content_lines(text).peekable();
    let mut out: Vec<(usize, Camera)> = Vec::new();
    while let Some(&(first_line, _)) = lines.peek() {
        let mut take = |key: &str| -> Result<(usize, Vec<&str>)> {
            let (ln, l) = lines.next().ok_or_else(|| {
                parse_err(first_line, format!("camera block ends before '{key}'"))
            })?;
            let mut toks = l.split_whitespace();
            let head = toks.next().unwrap_or("");
            if head != key {
                return Err(parse_err(ln, format!("expected '{key}', found '{head}'")));
            }
            Ok((ln, toks.collect()))
        };

        let (id_line, id_toks) = take("view")?;
        if id_toks.len() != 1 {
            return Err(parse_err(id_line, "view expects a single id"));
        }
        let id: usize = id_toks[0]
            .parse()
            .map_err(|_| parse_err(id_line, format!("bad view id '{}'", id_toks[0])))?;
        if out.iter().any(|(seen, _)| *seen == id) {
            return Err(parse_err(id_line, format!("duplicate view id {id}")));
        }

        let (size_line, size_toks) = take("size")?;
        if size_toks.len() != 2 {
            return Err(parse_err(size_line, "size expects width and height"));
        }
        let width: usize = size_toks[0]
            .parse()
            .map_err(|_| parse_err(size_line, format!("bad width '{}'", size_toks[0])))?;
        let height: usize = size_toks[1]
            .parse()
            .map_err(|_| parse_err(size_line, format!("bad height '{}'", size_toks[1])))?;

        let (k_line, k_toks) = take("K")?;
        let kv = parse_floats(k_line, &k_toks, 9, "K")?;
        let (r_line, r_toks) = take("R")?;
        let rv = parse_floats(r_line, &r_toks, 9, "R")?;
        let (t_line, t_toks) = take("t")?;
        let tv = parse_floats(t_line, &t_toks, 3, "t")?;

        let k = Matrix3::from_row_slice(&kv);
        let r = Matrix3::from_row_slice(&rv);
        let t = Vector3::new(tv[0], tv[1], tv[2]);
        let cam = Camera::new(k, r, t, width, height)
            .map_err(|e| parse_err(id_line, format!("view {id}: {e}")))?;
        out.push((id, cam));
    }
    if out.is_empty() {
        return Err(parse_err(1, "no camera blocks found"));
    }
    Ok(out)
}

/// Serializes depth bounds as two lines, `near <r>` and `far <r>`.
pub fn write_bounds_text(near: f64, far: f64) -> String {
    format!("near {near}\nfar {far}\n")
}

/// Parses the format written by [`write_bounds_text`] and checks
/// `0 < near < far`.
pub fn parse_bounds_text(text: &str) -> Result<(f64, f64)> {
    let mut near = None;
    let mut far = None;
    for (ln, l) in content_lines(text) {
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(parse_err(ln, "expected '<key> <value>'"));
        }
        let v: f64 = toks[1]
            .parse()
            .map_err(|_| parse_err(ln, format!("bad float '{}'", toks[1])))?;
        let slot = match toks[0] {
            "near" => &mut near,
            "far" => &mut far,
            other => return Err(parse_err(ln, format!("unknown key '{other}'"))),
        };
        if slot.is_some() {
            return Err(parse_err(ln, format!("duplicate key '{}'", toks[0])));
        }
        *slot = Some(v);
    }
    let near = near.ok_or_else(|| parse_err(1, "missing 'near'"))?;
    let far = far.ok_or_else(|| parse_err(1, "missing 'far'"))?;
    if !near.is_finite() || !far.is_finite() || near <= 0.0 || far <= near {
        return Err(GlrError::Bounds(format!(
            "need 0 < near < far, got near={near} far={far}"
        )));
    }
    Ok((near, far))
}
