//! Pointwise and resampling operators, plus the residual block built on conv2d.

use super::conv::{conv2d, conv2d_backward};
use super::{Scalar, Tensor};
use crate::{GlrError, Result};

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// Gradient of relu given the pre-activation input; the subgradient at 0 is 0.
pub fn relu_backward<S: Scalar>(x: &Tensor<S>, dy: &Tensor<S>) -> Result<Tensor<S>> {
    if x.dims() != dy.dims() {
        return Err(GlrError::Shape(format!(
            "relu backward: {:?} vs {:?}",
            x.dims(),
            dy.dims()
        )));
    }
    let mut out = dy.clone();
    for (g, &v) in out.data_mut().iter_mut().zip(x.data()) {
        if v <= S::zero() {
            *g = S::zero();
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

impl std::fmt::Display for UpsampleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            UpsampleMode::Nearest => "nearest",
            UpsampleMode::Bilinear => "bilinear",
        })
    }
}

impl std::str::FromStr for UpsampleMode {
    type Err = GlrError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(UpsampleMode::Nearest),
            "bilinear" => Ok(UpsampleMode::Bilinear),
            other => Err(GlrError::Config(format!(
                "unknown upsample mode {other:?} (expected nearest or bilinear)"
            ))),
        }
    }
}

/// Bilinear source coordinate for output index `o` at scale 2 without corner
/// alignment: i = (o + 0.5)/2 - 0.5, split into floor index and fraction.
/// Taps are clamped to the valid range, which reproduces edge values.
fn bilinear_taps(o: usize, len: usize) -> (usize, usize, f64) {
    let i = 0.5 * o as f64 - 0.25;
    let i0 = i.floor();
    let f = i - i0;
    let a = (i0.max(0.0) as usize).min(len - 1);
    let b = ((i0 + 1.0).max(0.0) as usize).min(len - 1);
    (a, b, f)
}

/// Doubles H and W of a [B, C, H, W] tensor.
pub fn upsample2x<S: Scalar>(x: &Tensor<S>, mode: UpsampleMode) -> Result<Tensor<S>> {
    let d = x.dims();
    if d.len() != 4 {
        return Err(GlrError::Shape(format!(
            "upsample2x expects 4D input, got {d:?}"
        )));
    }
    let (bc, h, w) = (d[0] * d[1], d[2], d[3]);
    let (ho, wo) = (2 * h, 2 * w);
    let mut y = Tensor::zeros(&[d[0], d[1], ho, wo]);
    let xs = x.data();
    let ys = y.data_mut();
    match mode {
        UpsampleMode::Nearest => {
            for p in 0..bc {
                let src = &xs[p * h * w..(p + 1) * h * w];
                let dst = &mut ys[p * ho * wo..(p + 1) * ho * wo];
                for oy in 0..ho {
                    let srow = &src[(oy / 2) * w..(oy / 2 + 1) * w];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    for ox in 0..wo {
                        drow[ox] = srow[ox / 2];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let col_taps: Vec<_> = (0..wo).map(|ox| bilinear_taps(ox, w)).collect();
            for p in 0..bc {
                let src = &xs[p * h * w..(p + 1) * h * w];
                let dst = &mut ys[p * ho * wo..(p + 1) * ho * wo];
                for oy in 0..ho {
                    let (y0, y1, fy) = bilinear_taps(oy, h);
                    let wy0 = S::from_f64(1.0 - fy);
                    let wy1 = S::from_f64(fy);
                    let r0 = &src[y0 * w..(y0 + 1) * w];
                    let r1 = &src[y1 * w..(y1 + 1) * w];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, &(x0, x1, fx)) in col_taps.iter().enumerate() {
                        let wx0 = S::from_f64(1.0 - fx);
                        let wx1 = S::from_f64(fx);
                        drow[ox] = wy0 * (wx0 * r0[x0] + wx1 * r0[x1])
                            + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Gradient of `upsample2x`: scatter `dy` back onto the input grid.
pub fn upsample2x_backward<S: Scalar>(
    mode: UpsampleMode,
    in_dims: &[usize],
    dy: &Tensor<S>,
) -> Result<Tensor<S>> {
    if in_dims.len() != 4 {
        return Err(GlrError::Shape(format!(
            "upsample2x expects 4D input, got {in_dims:?}"
        )));
    }
    let (bc, h, w) = (in_dims[0] * in_dims[1], in_dims[2], in_dims[3]);
    let (ho, wo) = (2 * h, 2 * w);
    if dy.dims() != [in_dims[0], in_dims[1], ho, wo] {
        return Err(GlrError::Shape(format!(
            "upsample2x backward: dy {:?} does not match input {:?}",
            dy.dims(),
            in_dims
        )));
    }
    let mut dx = Tensor::zeros(in_dims);
    let dys = dy.data();
    let dxs = dx.data_mut();
    match mode {
        UpsampleMode::Nearest => {
            for p in 0..bc {
                let src = &dys[p * ho * wo..(p + 1) * ho * wo];
                let dst = &mut dxs[p * h * w..(p + 1) * h * w];
                for oy in 0..ho {
                    let drow = &mut dst[(oy / 2) * w..(oy / 2 + 1) * w];
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    for ox in 0..wo {
                        drow[ox / 2] += srow[ox];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let col_taps: Vec<_> = (0..wo).map(|ox| bilinear_taps(ox, w)).collect();
            for p in 0..bc {
                let src = &dys[p * ho * wo..(p + 1) * ho * wo];
                let dst = &mut dxs[p * h * w..(p + 1) * h * w];
                for oy in 0..ho {
                    let (y0, y1, fy) = bilinear_taps(oy, h);
                    let wy0 = S::from_f64(1.0 - fy);
                    let wy1 = S::from_f64(fy);
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    for (ox, &(x0, x1, fx)) in col_taps.iter().enumerate() {
                        let wx0 = S::from_f64(1.0 - fx);
                        let wx1 = S::from_f64(fx);
                        let g = srow[ox];
                        dst[y0 * w + x0] += wy0 * wx0 * g;
                        dst[y0 * w + x1] += wy0 * wx1 * g;
                        dst[y1 * w + x0] += wy1 * wx0 * g;
                        dst[y1 * w + x1] += wy1 * wx1 * g;
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Weights of one residual block: conv-relu-conv with an identity skip when
/// Cin == Cout, otherwise a 1x1 projection. All convs share `groups`.
pub struct ResblockWeights<'a, S> {
    pub conv1_w: &'a Tensor<S>,
    pub conv1_b: &'a Tensor<S>,
    pub conv2_w: &'a Tensor<S>,
    pub conv2_b: &'a Tensor<S>,
    pub skip: Option<(&'a Tensor<S>, &'a Tensor<S>)>,
}

/// Intermediates needed by the backward pass.
pub struct ResblockCache<S> {
    pub x: Tensor<S>,
    pub pre: Tensor<S>,
    pub act: Tensor<S>,
}

pub fn resblock<S: Scalar>(
    x: &Tensor<S>,
    w: &ResblockWeights<S>,
    groups: usize,
) -> Result<Tensor<S>> {
    let (y, _) = resblock_forward_cached(x, w, groups)?;
    Ok(y)
}

pub fn resblock_forward_cached<S: Scalar>(
    x: &Tensor<S>,
    w: &ResblockWeights<S>,
    groups: usize,
) -> Result<(Tensor<S>, ResblockCache<S>)> {
    let cin = x.dims().get(1).copied().unwrap_or(0);
    let cout = w.conv1_w.dims()[0];
    if w.skip.is_none() && cin != cout {
        return Err(GlrError::Shape(format!(
            "resblock with identity skip needs Cin == Cout, got {cin} -> {cout}"
        )));
    }
    let pre = conv2d(x, w.conv1_w, w.conv1_b, 1, groups)?;
    let act = relu(&pre);
    let mut y = conv2d(&act, w.conv2_w, w.conv2_b, 1, groups)?;
    match w.skip {
        Some((sw, sb)) => {
            let s = conv2d(x, sw, sb, 1, groups)?;
            y.add_assign(&s)?;
        }
        None => y.add_assign(x)?,
    }
    Ok((
        y,
        ResblockCache {
            x: x.clone(),
            pre,
            act,
        },
    ))
}

/// Gradients of a resblock. Returns (dx, [dconv1_w, dconv1_b, dconv2_w,
/// dconv2_b] and, when a projection skip exists, (dskip_w, dskip_b)).
#[allow(clippy::type_complexity)]
pub fn resblock_backward<S: Scalar>(
    cache: &ResblockCache<S>,
    w: &ResblockWeights<S>,
    groups: usize,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, [Tensor<S>; 4], Option<(Tensor<S>, Tensor<S>)>)> {
    let (dact, dw2, db2) = conv2d_backward(&cache.act, w.conv2_w, 1, groups, dy, true)?;
    let dpre = relu_backward(&cache.pre, &dact)?;
    let (mut dx, dw1, db1) = conv2d_backward(&cache.x, w.conv1_w, 1, groups, &dpre, true)?;
    let dskip = match w.skip {
        Some((sw, _)) => {
            let (dxs, dws, dbs) = conv2d_backward(&cache.x, sw, 1, groups, dy, true)?;
            dx.add_assign(&dxs)?;
            Some((dws, dbs))
        }
        None => {
            dx.add_assign(dy)?;
            None
        }
    };
    Ok((dx, [dw1, db1, dw2, db2], dskip))
}
