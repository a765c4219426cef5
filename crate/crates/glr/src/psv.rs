//! Plane sweep volumes: inverse-warping posed input views onto fronto-parallel
//! depth planes of a target camera, plus the channel bookkeeping the renderer
//! expects (depth grouping, positional and angular conditioning) and focal
//! stack diagnostics.
//!
//! Bilinear sampling uses the pixel-center convention: pixel `(row, col)`
//! sits at continuous coordinate `(x = col, y = row)`. Samples outside the
//! source image contribute zero. Warps are computed independently per output
//! pixel in full-image coordinates, so building a volume on a patch equals
//! cropping the full-image volume bit for bit.

use nalgebra::{Matrix3, Vector3};

use crate::camera::{angular_encoding, plane_homography, Camera, DepthPlanes};
use crate::tensor::Tensor;
use crate::{GlrError, Result};

/// Color image with values in `[0, 1]`, stored channel-major
/// (plane by plane, row-major within a plane).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn zeros(channels: usize, height: usize, width: usize) -> ImageBuffer {
        ImageBuffer {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Validating constructor: finite values within `1e-6` of `[0, 1]`,
    /// clamped exactly onto it.
    pub fn from_data(
        channels: usize,
        height: usize,
        width: usize,
        mut data: Vec<f32>,
    ) -> Result<ImageBuffer> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(GlrError::Shape("image dimensions must be positive".into()));
        }
        if data.len() != channels * height * width {
            return Err(GlrError::Shape(format!(
                "image data length {} does not match {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        for v in &mut data {
            if !v.is_finite() || *v < -1e-6 || *v > 1.0 + 1e-6 {
                return Err(GlrError::NonFinite(format!(
                    "image value {v} outside [0, 1]"
                )));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(ImageBuffer {
            channels,
            height,
            width,
            data,
        })
    }

    /// Converts an arbitrary `[C, H, W]` tensor to an image by clamping to
    /// `[0, 1]`; non-finite values are an error.
    pub fn from_tensor_clamped(t: &Tensor<f32>) -> Result<ImageBuffer> {
        if t.dims().len() != 3 {
            return Err(GlrError::Shape(format!(
                "expected a [C, H, W] tensor, got {:?}",
                t.dims()
            )));
        }
        if !t.all_finite() {
            return Err(GlrError::NonFinite(
                "image tensor holds non-finite values".into(),
            ));
        }
        let data = t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(ImageBuffer {
            channels: t.dims()[0],
            height: t.dims()[1],
            width: t.dims()[2],
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// One channel plane, row-major.
    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Stores a value, clamped onto `[0, 1]` to keep the image invariant.
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v.clamp(0.0, 1.0);
    }

    /// Extracts `rect`, which must lie inside the image.
    pub fn crop(&self, rect: Rect) -> Result<ImageBuffer> {
        if !rect.fits_in(self.width, self.height) {
            return Err(GlrError::Shape(format!(
                "crop {rect:?} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut out = ImageBuffer::zeros(self.channels, rect.height, rect.width);
        for c in 0..self.channels {
            for y in 0..rect.height {
                let src = (c * self.height + rect.y0 + y) * self.width + rect.x0;
                let dst = (c * rect.height + y) * rect.width;
                out.data[dst..dst + rect.width].copy_from_slice(&self.data[src..src + rect.width]);
            }
        }
        Ok(out)
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[self.channels, self.height, self.width], self.data.clone()).unwrap()
    }
}

/// Axis-aligned pixel rectangle in full-target-image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, width: usize, height: usize) -> Rect {
        Rect {
            x0,
            y0,
            width,
            height,
        }
    }

    /// The whole image.
    pub fn full(width: usize, height: usize) -> Rect {
        Rect {
            x0: 0,
            y0: 0,
            width,
            height,
        }
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.width >= 1
            && self.height >= 1
            && self.x0 + self.width <= width
            && self.y0 + self.height <= height
    }
}

/// Five-dimensional sweep volume `[D, V, Cin, H, W]`: every input view warped
/// onto every depth plane, restricted to `patch` of the target image.
#[derive(Debug, Clone)]
pub struct PlaneSweepVolume {
    pub data: Tensor<f32>,
    pub depths: DepthPlanes,
    pub patch: Rect,
    /// `(height, width)` of the full target image.
    pub full_size: (usize, usize),
}

impl PlaneSweepVolume {
    pub fn n_depths(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn n_views(&self) -> usize {
        self.data.dims()[1]
    }

    /// Channels per view: 3, or 4 with the angular channel.
    pub fn cin(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn height(&self) -> usize {
        self.data.dims()[3]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[4]
    }
}

/// Depth-grouped volume `[D/G, Cin·G·V (+2), H, W]`, the renderer's input.
#[derive(Debug, Clone)]
pub struct GroupedPsv {
    pub data: Tensor<f32>,
    pub g: usize,
    pub n_views: usize,
    /// Channels per view in the underlying volume.
    pub cin: usize,
    pub depths: DepthPlanes,
    pub patch: Rect,
    pub full_size: (usize, usize),
    /// Whether the two positional channels have been appended.
    pub positional: bool,
}

impl GroupedPsv {
    pub fn n_groups(&self) -> usize {
        self.data.dims()[0]
    }
}

/// Resamples `src` through the homography `h`: output pixel `p` (in
/// full-image coordinates given by `out_rect`) reads the source at
/// `dehomog(h * (px, py, 1))` with bilinear interpolation and zero outside.
///
/// Pixels whose homogeneous depth is non-positive (behind the camera) are
/// zero-filled; a singular `h` is an error.
pub fn warp_image(src: &ImageBuffer, h: &Matrix3<f64>, out_rect: Rect) -> Result<ImageBuffer> {
    if out_rect.width == 0 || out_rect.height == 0 {
        return Err(GlrError::Shape("empty warp output rect".into()));
    }
    let norm = h.norm();
    if !(h.determinant().abs() > 1e-15 * norm * norm * norm) {
        return Err(GlrError::Degenerate(format!(
            "singular homography, det = {:.3e}",
            h.determinant()
        )));
    }
    let (ch, sh, sw) = (src.channels, src.height, src.width);
    let (oh, ow) = (out_rect.height, out_rect.width);
    let plane_len = sh * sw;
    let mut out = ImageBuffer::zeros(ch, oh, ow);
    for oy in 0..oh {
        let fy = (out_rect.y0 + oy) as f64;
        for ox in 0..ow {
            let fx = (out_rect.x0 + ox) as f64;
            let q = h * Vector3::new(fx, fy, 1.0);
            let amax = q.x.abs().max(q.y.abs()).max(q.z.abs());
            if !(q.z > 1e-12 * amax) {
                continue;
            }
            let sx = q.x / q.z;
            let sy = q.y / q.z;
            let x0f = sx.floor();
            let y0f = sy.floor();
            let wx1 = sx - x0f;
            let wy1 = sy - y0f;
            let (x0, y0) = (x0f as isize, y0f as isize);

            let mut taps = [(0usize, 0.0f64); 4];
            let mut ntaps = 0;
            for (yi, wy) in [(y0, 1.0 - wy1), (y0 + 1, wy1)] {
                if wy == 0.0 || yi < 0 || yi >= sh as isize {
                    continue;
                }
                for (xi, wx) in [(x0, 1.0 - wx1), (x0 + 1, wx1)] {
                    if wx == 0.0 || xi < 0 || xi >= sw as isize {
                        continue;
                    }
                    taps[ntaps] = (yi as usize * sw + xi as usize, wy * wx);
                    ntaps += 1;
                }
            }
            if ntaps == 0 {
                continue;
            }
            let obase = oy * ow + ox;
            for c in 0..ch {
                let plane = &src.data[c * plane_len..(c + 1) * plane_len];
                let mut acc = 0.0f64;
                for &(idx, w) in &taps[..ntaps] {
                    acc += w * plane[idx] as f64;
                }
                out.data[c * oh * ow + obase] = acc as f32;
            }
        }
    }
    Ok(out)
}

/// Builds the sweep volume for `patch` of the target image.
///
/// Cameras must already be normalized to a canonical target. Each `(d, v)`
/// slab is `images[v]` warped through the plane homography at `depths[d]`;
/// with `with_angular`, a fourth constant channel carries the view/plane
/// angular encoding.
pub fn build_psv(
    images: &[ImageBuffer],
    views: &[Camera],
    target: &Camera,
    depths: &DepthPlanes,
    patch: Rect,
    with_angular: bool,
) -> Result<PlaneSweepVolume> {
    if images.is_empty() || images.len() != views.len() {
        return Err(GlrError::Shape(format!(
            "need matching non-empty image/view lists, got {} images, {} views",
            images.len(),
            views.len()
        )));
    }
    if depths.is_empty() {
        return Err(GlrError::Bounds("no depth planes".into()));
    }
    if !patch.fits_in(target.width, target.height) {
        return Err(GlrError::Shape(format!(
            "patch {patch:?} outside {}x{} target image",
            target.width, target.height
        )));
    }
    for (img, view) in images.iter().zip(views) {
        if img.channels != 3 {
            return Err(GlrError::Shape(format!(
                "input views must be 3-channel, got {}",
                img.channels
            )));
        }
        if img.width != view.width || img.height != view.height {
            return Err(GlrError::Shape(format!(
                "image {}x{} does not match its camera {}x{}",
                img.width, img.height, view.width, view.height
            )));
        }
    }
    let (d_n, v_n) = (depths.len(), views.len());
    let cin = if with_angular { 4 } else { 3 };
    let (h, w) = (patch.height, patch.width);
    let plane_len = h * w;
    let mut data: Tensor<f32> = Tensor::zeros(&[d_n, v_n, cin, h, w]);
    let out = data.data_mut();
    for (di, &a_d) in depths.distances.iter().enumerate() {
        for (vi, (img, view)) in images.iter().zip(views).enumerate() {
            let hom = plane_homography(view, target, a_d)?;
            let warped = warp_image(img, &hom, patch)?;
            let base = ((di * v_n + vi) * cin) * plane_len;
            out[base..base + 3 * plane_len].copy_from_slice(&warped.data);
            if with_angular {
                let enc = angular_encoding(view, a_d)? as f32;
                out[base + 3 * plane_len..base + 4 * plane_len].fill(enc);
            }
        }
    }
    Ok(PlaneSweepVolume {
        data,
        depths: depths.clone(),
        patch,
        full_size: (target.height, target.width),
    })
}

/// The `[D, V, Cin]` fiber of samples along the camera ray through target
/// pixel `(patch.x0 + w, patch.y0 + h)`.
pub fn ray_slice(psv: &PlaneSweepVolume, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (d_n, v_n, cin) = (psv.n_depths(), psv.n_views(), psv.cin());
    let (ph, pw) = (psv.height(), psv.width());
    if h >= ph || w >= pw {
        return Err(GlrError::Shape(format!(
            "ray ({h}, {w}) outside {ph}x{pw} patch"
        )));
    }
    let src = psv.data.data();
    let mut out = Vec::with_capacity(d_n * v_n * cin);
    for d in 0..d_n {
        for v in 0..v_n {
            for c in 0..cin {
                out.push(src[(((d * v_n + v) * cin + c) * ph + h) * pw + w]);
            }
        }
    }
    Tensor::from_vec(&[d_n, v_n, cin], out)
}

/// Stacks each run of `g` consecutive depths into one channel group:
/// `[D, V, Cin, H, W] -> [D/G, Cin·G·V, H, W]`, channels ordered depth-major,
/// then view, then color. Pure reindexing, inverted bit-exactly by
/// [`ungroup_depths`].
pub fn group_depths(psv: &PlaneSweepVolume, g: usize) -> Result<GroupedPsv> {
    let d_n = psv.n_depths();
    if g == 0 || d_n % g != 0 {
        return Err(GlrError::Shape(format!(
            "depth count {d_n} not divisible by group size {g}"
        )));
    }
    let (v_n, cin, h, w) = (psv.n_views(), psv.cin(), psv.height(), psv.width());
    let plane_len = h * w;
    let d_g = d_n / g;
    let mut data: Tensor<f32> = Tensor::zeros(&[d_g, cin * g * v_n, h, w]);
    // Both layouts keep each (depth, view, color) plane contiguous, and the
    // grouped channel order (depth-major, view, color) matches the source
    // iteration order, so each group is one contiguous copy.
    let group_len = g * v_n * cin * plane_len;
    data.data_mut()
        .copy_from_slice(&psv.data.data()[..d_g * group_len]);
    Ok(GroupedPsv {
        data,
        g,
        n_views: v_n,
        cin,
        depths: psv.depths.clone(),
        patch: psv.patch,
        full_size: psv.full_size,
        positional: false,
    })
}

/// Inverse of [`group_depths`]. Positional channels must not have been
/// appended (they have no slot in the 5D layout).
pub fn ungroup_depths(g: &GroupedPsv) -> Result<PlaneSweepVolume> {
    if g.positional {
        return Err(GlrError::Shape(
            "cannot ungroup after positional channels were appended".into(),
        ));
    }
    let dims = g.data.dims().to_vec();
    let (h, w) = (dims[2], dims[3]);
    let d_n = dims[0] * g.g;
    let mut data: Tensor<f32> = Tensor::zeros(&[d_n, g.n_views, g.cin, h, w]);
    data.data_mut().copy_from_slice(g.data.data());
    Ok(PlaneSweepVolume {
        data,
        depths: g.depths.clone(),
        patch: g.patch,
        full_size: g.full_size,
    })
}

/// Appends two positional channels to every depth group: row and column of
/// each pixel in *global* image coordinates, normalized to `[0, 1]` over the
/// full target image (patches keep their absolute position).
pub fn append_positional_channels(g: GroupedPsv) -> Result<GroupedPsv> {
    if g.positional {
        return Err(GlrError::Shape(
            "positional channels already appended".into(),
        ));
    }
    let (hf, wf) = g.full_size;
    if hf < 2 || wf < 2 {
        return Err(GlrError::Shape(format!(
            "positional channels need a full image of at least 2x2, got {hf}x{wf}"
        )));
    }
    let dims = g.data.dims();
    let (d_g, c_old, h, w) = (dims[0], dims[1], dims[2], dims[3]);
    let plane_len = h * w;

    let mut h_plane = Vec::with_capacity(plane_len);
    let mut w_plane = Vec::with_capacity(plane_len);
    for y in 0..h {
        let hv = ((g.patch.y0 + y) as f64 / (hf - 1) as f64) as f32;
        for x in 0..w {
            h_plane.push(hv);
            w_plane.push(((g.patch.x0 + x) as f64 / (wf - 1) as f64) as f32);
        }
    }

    let mut data: Tensor<f32> = Tensor::zeros(&[d_g, c_old + 2, h, w]);
    let src = g.data.data();
    let dst = data.data_mut();
    for dg in 0..d_g {
        let s = dg * c_old * plane_len;
        let d = dg * (c_old + 2) * plane_len;
        dst[d..d + c_old * plane_len].copy_from_slice(&src[s..s + c_old * plane_len]);
        dst[d + c_old * plane_len..d + (c_old + 1) * plane_len].copy_from_slice(&h_plane);
        dst[d + (c_old + 1) * plane_len..d + (c_old + 2) * plane_len].copy_from_slice(&w_plane);
    }
    Ok(GroupedPsv {
        data,
        positional: true,
        ..g
    })
}

/// Per-depth average over views of the color channels, clamped to `[0, 1]`:
/// the focal stack diagnostic. Depth planes near true surfaces come out
/// sharp; others show ghosting.
pub fn mean_psv(psv: &PlaneSweepVolume) -> Vec<ImageBuffer> {
    let (d_n, v_n, cin, h, w) = (
        psv.n_depths(),
        psv.n_views(),
        psv.cin(),
        psv.height(),
        psv.width(),
    );
    let plane_len = h * w;
    let src = psv.data.data();
    let inv_v = 1.0 / v_n as f64;
    let mut out = Vec::with_capacity(d_n);
    for d in 0..d_n {
        let mut img = ImageBuffer::zeros(3, h, w);
        for c in 0..3.min(cin) {
            for i in 0..plane_len {
                let mut acc = 0.0f64;
                for v in 0..v_n {
                    acc += src[(((d * v_n + v) * cin + c) * plane_len) + i] as f64;
                }
                img.data[c * plane_len + i] = (acc * inv_v).clamp(0.0, 1.0) as f32;
            }
        }
        out.push(img);
    }
    out
}

/// Mean over pixels and color channels of the across-view population variance,
/// one value per depth plane. Minimal where the plane matches true scene
/// depth, making `argmin` a photoconsistency-based focus indicator.
pub fn cross_view_variance(psv: &PlaneSweepVolume) -> Vec<f64> {
    let (d_n, v_n, cin, h, w) = (
        psv.n_depths(),
        psv.n_views(),
        psv.cin(),
        psv.height(),
        psv.width(),
    );
    let plane_len = h * w;
    let src = psv.data.data();
    let inv_v = 1.0 / v_n as f64;
    let colors = 3.min(cin);
    let mut out = Vec::with_capacity(d_n);
    for d in 0..d_n {
        let mut total = 0.0f64;
        for c in 0..colors {
            for i in 0..plane_len {
                let mut mean = 0.0f64;
                for v in 0..v_n {
                    mean += src[(((d * v_n + v) * cin + c) * plane_len) + i] as f64;
                }
                mean *= inv_v;
                let mut var = 0.0f64;
                for v in 0..v_n {
                    let x = src[(((d * v_n + v) * cin + c) * plane_len) + i] as f64 - mean;
                    var += x * x;
                }
                total += var * inv_v;
            }
        }
        out.push(total / (colors * plane_len) as f64);
    }
    out
}
