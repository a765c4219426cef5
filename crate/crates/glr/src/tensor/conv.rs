//! 2D convolution (cross-correlation) with same-padding, stride, and groups,
//! implemented as im2col + GEMM. Backward recomputes im2col rather than
//! caching it; at the sizes used here the copy is cheap next to the GEMMs.

use super::{Scalar, Tensor};
use crate::{GlrError, Result};

struct ConvDims {
    bsz: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cin_g: usize,
    cout_g: usize,
}

fn check_conv<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
    stride: usize,
    groups: usize,
) -> Result<ConvDims> {
    let xd = x.dims();
    let wd = w.dims();
    if xd.len() != 4 {
        return Err(GlrError::Shape(format!(
            "conv2d input must be 4D, got {xd:?}"
        )));
    }
    if wd.len() != 4 {
        return Err(GlrError::Shape(format!(
            "conv2d weight must be 4D, got {wd:?}"
        )));
    }
    let (bsz, cin, h, w_) = (xd[0], xd[1], xd[2], xd[3]);
    let (cout, cin_g, k, k2) = (wd[0], wd[1], wd[2], wd[3]);
    if k != k2 || !(k == 1 || k == 3) {
        return Err(GlrError::Shape(format!(
            "kernel must be 1x1 or 3x3, got {k}x{k2}"
        )));
    }
    if groups == 0 || stride == 0 {
        return Err(GlrError::Shape("stride and groups must be positive".into()));
    }
    if cin % groups != 0 || cout % groups != 0 {
        return Err(GlrError::Shape(format!(
            "channels ({cin} in, {cout} out) not divisible by groups {groups}"
        )));
    }
    if cin_g != cin / groups {
        return Err(GlrError::Shape(format!(
            "weight expects {cin_g} channels per group, input has {}",
            cin / groups
        )));
    }
    if let Some(b) = b {
        if b.dims() != [cout] {
            return Err(GlrError::Shape(format!(
                "bias dims {:?}, expected [{cout}]",
                b.dims()
            )));
        }
    }
    if h % stride != 0 || w_ % stride != 0 {
        return Err(GlrError::Shape(format!(
            "spatial dims {h}x{w_} not divisible by stride {stride}"
        )));
    }
    Ok(ConvDims {
        bsz,
        cin,
        h,
        w: w_,
        cout,
        k,
        pad: (k - 1) / 2,
        ho: h / stride,
        wo: w_ / stride,
        cin_g,
        cout_g: cout / groups,
    })
}

/// Output-column range [lo, hi) for which iw = ow*stride + kw - pad lands in [0, w).
fn ow_range(w: usize, wo: usize, stride: usize, kw: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kw).div_ceil(stride).min(wo);
    let last = w as isize - 1 + pad as isize - kw as isize;
    if last < 0 {
        return (lo, lo);
    }
    let hi = (last as usize / stride + 1).clamp(lo, wo);
    (lo, hi)
}

/// Fill `col` (shape [cin_g*k*k, ho*wo] row-major) from one group slice of `x`
/// (shape [cin_g, h, w]).
fn im2col<S: Scalar>(x: &[S], d: &ConvDims, stride: usize, col: &mut [S]) {
    let (h, w, k, pad, ho, wo) = (d.h, d.w, d.k, d.pad, d.ho, d.wo);
    let n = ho * wo;
    for ic in 0..d.cin_g {
        let xc = &x[ic * h * w..(ic + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = (ic * k + kh) * k + kw;
                let dst = &mut col[row * n..(row + 1) * n];
                let (lo, hi) = ow_range(w, wo, stride, kw, pad);
                for oh in 0..ho {
                    let ih = (oh * stride + kh) as isize - pad as isize;
                    let drow = &mut dst[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= h as isize {
                        drow.fill(S::zero());
                        continue;
                    }
                    let src = &xc[ih as usize * w..(ih as usize + 1) * w];
                    drow[..lo].fill(S::zero());
                    drow[hi..].fill(S::zero());
                    if stride == 1 {
                        let off = lo + kw - pad; // >= 0 by the lo bound
                        drow[lo..hi].copy_from_slice(&src[off..off + (hi - lo)]);
                    } else {
                        for ow in lo..hi {
                            let iw = ow * stride + kw - pad;
                            drow[ow] = src[iw];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add `col` (same layout as im2col) back into one group slice of `dx`.
fn col2im_add<S: Scalar>(col: &[S], d: &ConvDims, stride: usize, dx: &mut [S]) {
    let (h, w, k, pad, ho, wo) = (d.h, d.w, d.k, d.pad, d.ho, d.wo);
    let n = ho * wo;
    for ic in 0..d.cin_g {
        let xc = &mut dx[ic * h * w..(ic + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = (ic * k + kh) * k + kw;
                let src = &col[row * n..(row + 1) * n];
                let (lo, hi) = ow_range(w, wo, stride, kw, pad);
                for oh in 0..ho {
                    let ih = (oh * stride + kh) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst = &mut xc[ih as usize * w..(ih as usize + 1) * w];
                    let srow = &src[oh * wo..(oh + 1) * wo];
                    for ow in lo..hi {
                        let iw = ow * stride + kw - pad;
                        dst[iw] += srow[ow];
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x` [B, Cin, H, W] with `w` [Cout, Cin/groups, k, k]
/// and bias `b` [Cout]; zero same-padding, output [B, Cout, H/stride, W/stride].
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    stride: usize,
    groups: usize,
) -> Result<Tensor<S>> {
    let d = check_conv(x, w, Some(b), stride, groups)?;
    let n = d.ho * d.wo;
    let kk = d.cin_g * d.k * d.k;
    let mut y: Tensor<S> = Tensor::zeros(&[d.bsz, d.cout, d.ho, d.wo]);
    let mut col = vec![S::zero(); kk * n];
    let xs = x.data();
    let ws = w.data();
    let ys = y.data_mut();
    for bi in 0..d.bsz {
        for g in 0..groups {
            let xoff = (bi * d.cin + g * d.cin_g) * d.h * d.w;
            im2col(&xs[xoff..xoff + d.cin_g * d.h * d.w], &d, stride, &mut col);
            let yoff = (bi * d.cout + g * d.cout_g) * n;
            unsafe {
                S::gemm(
                    d.cout_g,
                    kk,
                    n,
                    S::one(),
                    ws.as_ptr().add(g * d.cout_g * kk),
                    kk as isize,
                    1,
                    col.as_ptr(),
                    n as isize,
                    1,
                    S::zero(),
                    ys.as_mut_ptr().add(yoff),
                    n as isize,
                    1,
                );
            }
        }
        let bs = b.data();
        for oc in 0..d.cout {
            let bias = bs[oc];
            if bias != S::zero() {
                for v in &mut ys[(bi * d.cout + oc) * n..(bi * d.cout + oc + 1) * n] {
                    *v += bias;
                }
            }
        }
    }
    Ok(y)
}

/// Gradients of `conv2d` w.r.t. (x, w, b) given upstream `dy`.
/// `need_dx = false` skips the input gradient (returns a zero tensor) for
/// pipeline heads whose input is not learned.
pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    stride: usize,
    groups: usize,
    dy: &Tensor<S>,
    need_dx: bool,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let d = check_conv(x, w, None, stride, groups)?;
    let n = d.ho * d.wo;
    if dy.dims() != [d.bsz, d.cout, d.ho, d.wo] {
        return Err(GlrError::Shape(format!(
            "conv2d backward: dy dims {:?}, expected {:?}",
            dy.dims(),
            [d.bsz, d.cout, d.ho, d.wo]
        )));
    }
    let kk = d.cin_g * d.k * d.k;
    let mut dx: Tensor<S> = Tensor::zeros(x.dims());
    let mut dw: Tensor<S> = Tensor::zeros(w.dims());
    let mut db: Tensor<S> = Tensor::zeros(&[d.cout]);

    let dys = dy.data();
    for oc in 0..d.cout {
        let mut s = S::zero();
        for bi in 0..d.bsz {
            for &v in &dys[(bi * d.cout + oc) * n..(bi * d.cout + oc + 1) * n] {
                s += v;
            }
        }
        db.data_mut()[oc] = s;
    }

    let xs = x.data();
    let ws = w.data();
    let mut col = vec![S::zero(); kk * n];
    let mut colgrad = if need_dx {
        vec![S::zero(); kk * n]
    } else {
        Vec::new()
    };
    for bi in 0..d.bsz {
        for g in 0..groups {
            let xoff = (bi * d.cin + g * d.cin_g) * d.h * d.w;
            let dyoff = (bi * d.cout + g * d.cout_g) * n;
            im2col(&xs[xoff..xoff + d.cin_g * d.h * d.w], &d, stride, &mut col);
            unsafe {
                // dw[oc, r] += sum_n dy[oc, n] * col[r, n]
                S::gemm(
                    d.cout_g,
                    n,
                    kk,
                    S::one(),
                    dys.as_ptr().add(dyoff),
                    n as isize,
                    1,
                    col.as_ptr(),
                    1,
                    n as isize,
                    S::one(),
                    dw.data_mut().as_mut_ptr().add(g * d.cout_g * kk),
                    kk as isize,
                    1,
                );
            }
            if need_dx {
                unsafe {
                    // colgrad[r, n] = sum_oc w[oc, r] * dy[oc, n]
                    S::gemm(
                        kk,
                        d.cout_g,
                        n,
                        S::one(),
                        ws.as_ptr().add(g * d.cout_g * kk),
                        1,
                        kk as isize,
                        dys.as_ptr().add(dyoff),
                        n as isize,
                        1,
                        S::zero(),
                        colgrad.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
                let dxoff = (bi * d.cin + g * d.cin_g) * d.h * d.w;
                col2im_add(
                    &colgrad,
                    &d,
                    stride,
                    &mut dx.data_mut()[dxoff..dxoff + d.cin_g * d.h * d.w],
                );
            }
        }
    }
    Ok((dx, dw, db))
}

/// Direct six-loop convolution, the oracle the GEMM path is tested against.
pub fn conv2d_reference<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    stride: usize,
    groups: usize,
) -> Result<Tensor<S>> {
    let d = check_conv(x, w, Some(b), stride, groups)?;
    let mut y = Tensor::zeros(&[d.bsz, d.cout, d.ho, d.wo]);
    let xs = x.data();
    let ws = w.data();
    let bs = b.data();
    for bi in 0..d.bsz {
        for oc in 0..d.cout {
            let g = oc / d.cout_g;
            for oh in 0..d.ho {
                for ow in 0..d.wo {
                    let mut acc = bs[oc];
                    for ic in 0..d.cin_g {
                        for kh in 0..d.k {
                            for kw in 0..d.k {
                                let ih = (oh * stride + kh) as isize - d.pad as isize;
                                let iw = (ow * stride + kw) as isize - d.pad as isize;
                                if ih < 0 || iw < 0 || ih >= d.h as isize || iw >= d.w as isize {
                                    continue;
                                }
                                let xv = xs[((bi * d.cin + g * d.cin_g + ic) * d.h + ih as usize)
                                    * d.w
                                    + iw as usize];
                                let wv = ws[((oc * d.cin_g + ic) * d.k + kh) * d.k + kw];
                                acc += xv * wv;
                            }
                        }
                    }
                    y.data_mut()[((bi * d.cout + oc) * d.ho + oh) * d.wo + ow] = acc;
                }
            }
        }
    }
    Ok(y)
}
