//! 2-d convolution kernels (NCHW input, OIHW weights).
//!
//! General convolutions go through im2col + gemm per sample and group; the
//! depthwise case (one input and one output channel per group) uses direct
//! loops. Every loop runs in a fixed order so results are bit-reproducible.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvAttrs {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvAttrs {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvAttrs {
    /// "Same" padding for an odd kernel: `dilation * (kernel - 1) / 2`.
    pub fn same(kernel: usize, stride: usize, dilation: usize, groups: usize) -> Self {
        Self {
            stride,
            padding: dilation * (kernel - 1) / 2,
            dilation,
            groups,
        }
    }

    pub fn out_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

pub(crate) struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cig: usize,
    cog: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    a: ConvAttrs,
}

impl ConvGeom {
    pub(crate) fn new(x: &Tensor, weight: &Tensor, a: ConvAttrs) -> Result<Self> {
        let [n, cin, h, w] = x.dims4("conv2d")?;
        let [cout, cig, kh, kw] = weight.dims4("conv2d")?;
        let g = a.groups;
        if g == 0 || a.stride == 0 || a.dilation == 0 {
            return shape_err("conv2d", "stride, dilation and groups must be positive");
        }
        if cin % g != 0 || cout % g != 0 {
            return shape_err(
                "conv2d",
                format!("channels in={cin} out={cout} not divisible by groups={g}"),
            );
        }
        if cig != cin / g {
            return shape_err(
                "conv2d",
                format!("weight expects {cig} input channels per group, input has {}", cin / g),
            );
        }
        let (Some(ho), Some(wo)) = (a.out_size(h, kh), a.out_size(w, kw)) else {
            return shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} (dilation {}) larger than padded input {h}x{w}", a.dilation),
            );
        };
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            cig,
            cog: cout / g,
            kh,
            kw,
            ho,
            wo,
            a,
        })
    }

    pub(crate) fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.ho, self.wo]
    }

    fn is_depthwise(&self) -> bool {
        self.cig == 1 && self.cog == 1
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.a.stride == 1 && self.a.padding == 0
    }
}

/// Output index range `[lo, hi)` whose input coordinate `o * stride + offset`
/// falls inside `[0, input)`.
fn valid_range(out_len: usize, input: usize, offset: isize, stride: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let last = input as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let lo = lo.max(0) as usize;
    let hi = (hi.max(0) as usize).min(out_len);
    (lo.min(hi), hi)
}

fn im2col(geo: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let p = geo.ho * geo.wo;
    let a = geo.a;
    col.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..geo.cig {
        let plane = &x[c * geo.h * geo.w..(c + 1) * geo.h * geo.w];
        for ki in 0..geo.kh {
            let oy_off = (ki * a.dilation) as isize - a.padding as isize;
            let (y0, y1) = valid_range(geo.ho, geo.h, oy_off, a.stride);
            for kj in 0..geo.kw {
                let ox_off = (kj * a.dilation) as isize - a.padding as isize;
                let (x0, x1) = valid_range(geo.wo, geo.w, ox_off, a.stride);
                let row = (c * geo.kh + ki) * geo.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in y0..y1 {
                    let iy = (oy * a.stride) as isize + oy_off;
                    let src = &plane[iy as usize * geo.w..];
                    for ox in x0..x1 {
                        let ix = (ox * a.stride) as isize + ox_off;
                        dst[oy * geo.wo + ox] = src[ix as usize];
                    }
                }
            }
        }
    }
}

fn col2im_add(geo: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    let p = geo.ho * geo.wo;
    let a = geo.a;
    for c in 0..geo.cig {
        let plane = &mut dx[c * geo.h * geo.w..(c + 1) * geo.h * geo.w];
        for ki in 0..geo.kh {
            let oy_off = (ki * a.dilation) as isize - a.padding as isize;
            let (y0, y1) = valid_range(geo.ho, geo.h, oy_off, a.stride);
            for kj in 0..geo.kw {
                let ox_off = (kj * a.dilation) as isize - a.padding as isize;
                let (x0, x1) = valid_range(geo.wo, geo.w, ox_off, a.stride);
                let row = (c * geo.kh + ki) * geo.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in y0..y1 {
                    let iy = ((oy * a.stride) as isize + oy_off) as usize;
                    for ox in x0..x1 {
                        let ix = ((ox * a.stride) as isize + ox_off) as usize;
                        plane[iy * geo.w + ix] += src[oy * geo.wo + ox];
                    }
                }
            }
        }
    }
}

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`, arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the debug assertions above bound every index the kernel touches;
    // callers pass slices sized from the same geometry.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn forward(x: &Tensor, weight: &Tensor, a: ConvAttrs) -> Result<Tensor> {
    let geo = ConvGeom::new(x, weight, a)?;
    let mut y = Tensor::zeros(&geo.out_shape());
    if geo.is_depthwise() {
        depthwise_forward(&geo, x.data(), weight.data(), y.data_mut());
        return Ok(y);
    }
    let p = geo.ho * geo.wo;
    let k = geo.cig * geo.kh * geo.kw;
    let g = a.groups;
    let mut col = vec![0.0; if geo.is_pointwise() { 0 } else { k * p }];
    let xd = x.data();
    let wd = weight.data();
    let yd = y.data_mut();
    for b in 0..geo.n {
        for gi in 0..g {
            let xs = &xd[(b * geo.cin + gi * geo.cig) * geo.h * geo.w..][..geo.cig * geo.h * geo.w];
            let ws = &wd[gi * geo.cog * k..(gi + 1) * geo.cog * k];
            let ys = &mut yd[(b * geo.cout + gi * geo.cog) * p..][..geo.cog * p];
            let cols: &[f64] = if geo.is_pointwise() {
                xs
            } else {
                im2col(&geo, xs, &mut col);
                &col
            };
            gemm(geo.cog, k, p, ws, (k, 1), cols, (p, 1), 0.0, ys);
        }
    }
    Ok(y)
}

/// Returns `(dx, dweight)`, each computed only when requested.
pub(crate) fn backward(
    x: &Tensor,
    weight: &Tensor,
    a: ConvAttrs,
    dy: &[f64],
    need_dx: bool,
    need_dw: bool,
) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
    let geo = ConvGeom::new(x, weight, a)?;
    let mut dx = need_dx.then(|| vec![0.0; x.numel()]);
    let mut dw = need_dw.then(|| vec![0.0; weight.numel()]);
    if !need_dx && !need_dw {
        return Ok((dx, dw));
    }
    if geo.is_depthwise() {
        depthwise_backward(&geo, x.data(), weight.data(), dy, dx.as_deref_mut(), dw.as_deref_mut());
        return Ok((dx, dw));
    }
    let p = geo.ho * geo.wo;
    let k = geo.cig * geo.kh * geo.kw;
    let g = a.groups;
    let pointwise = geo.is_pointwise();
    let mut col = vec![0.0; if pointwise { 0 } else { k * p }];
    let mut dcol = vec![0.0; if pointwise { 0 } else { k * p }];
    let xd = x.data();
    let wd = weight.data();
    for b in 0..geo.n {
        for gi in 0..g {
            let xoff = (b * geo.cin + gi * geo.cig) * geo.h * geo.w;
            let xs = &xd[xoff..][..geo.cig * geo.h * geo.w];
            let ws = &wd[gi * geo.cog * k..(gi + 1) * geo.cog * k];
            let dys = &dy[(b * geo.cout + gi * geo.cog) * p..][..geo.cog * p];
            if let Some(dw) = dw.as_deref_mut() {
                let cols: &[f64] = if pointwise {
                    xs
                } else {
                    im2col(&geo, xs, &mut col);
                    &col
                };
                let dws = &mut dw[gi * geo.cog * k..(gi + 1) * geo.cog * k];
                gemm(geo.cog, p, k, dys, (p, 1), cols, (1, p), 1.0, dws);
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dxs = &mut dx[xoff..][..geo.cig * geo.h * geo.w];
                if pointwise {
                    gemm(k, geo.cog, p, ws, (1, k), dys, (p, 1), 1.0, dxs);
                } else {
                    gemm(k, geo.cog, p, ws, (1, k), dys, (p, 1), 0.0, &mut dcol);
                    col2im_add(&geo, &dcol, dxs);
                }
            }
        }
    }
    Ok((dx, dw))
}

fn depthwise_forward(geo: &ConvGeom, x: &[f64], w: &[f64], y: &mut [f64]) {
    let a = geo.a;
    let (hw, p) = (geo.h * geo.w, geo.ho * geo.wo);
    for b in 0..geo.n {
        for c in 0..geo.cin {
            let xs = &x[(b * geo.cin + c) * hw..][..hw];
            let ys = &mut y[(b * geo.cout + c) * p..][..p];
            let wk = &w[c * geo.kh * geo.kw..][..geo.kh * geo.kw];
            for ki in 0..geo.kh {
                let oy_off = (ki * a.dilation) as isize - a.padding as isize;
                let (y0, y1) = valid_range(geo.ho, geo.h, oy_off, a.stride);
                for kj in 0..geo.kw {
                    let ox_off = (kj * a.dilation) as isize - a.padding as isize;
                    let (x0, x1) = valid_range(geo.wo, geo.w, ox_off, a.stride);
                    let wv = wk[ki * geo.kw + kj];
                    for oy in y0..y1 {
                        let iy = ((oy * a.stride) as isize + oy_off) as usize;
                        let row = &xs[iy * geo.w..];
                        let out = &mut ys[oy * geo.wo..];
                        for ox in x0..x1 {
                            let ix = ((ox * a.stride) as isize + ox_off) as usize;
                            out[ox] += wv * row[ix];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward(
    geo: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let a = geo.a;
    let (hw, p) = (geo.h * geo.w, geo.ho * geo.wo);
    let kk = geo.kh * geo.kw;
    for b in 0..geo.n {
        for c in 0..geo.cin {
            let xoff = (b * geo.cin + c) * hw;
            let xs = &x[xoff..][..hw];
            let dys = &dy[(b * geo.cout + c) * p..][..p];
            for ki in 0..geo.kh {
                let oy_off = (ki * a.dilation) as isize - a.padding as isize;
                let (y0, y1) = valid_range(geo.ho, geo.h, oy_off, a.stride);
                for kj in 0..geo.kw {
                    let ox_off = (kj * a.dilation) as isize - a.padding as isize;
                    let (x0, x1) = valid_range(geo.wo, geo.w, ox_off, a.stride);
                    let widx = c * kk + ki * geo.kw + kj;
                    let wv = w[widx];
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let iy = ((oy * a.stride) as isize + oy_off) as usize;
                        for ox in x0..x1 {
                            let ix = ((ox * a.stride) as isize + ox_off) as usize;
                            let g = dys[oy * geo.wo + ox];
                            acc += g * xs[iy * geo.w + ix];
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[xoff + iy * geo.w + ix] += wv * g;
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
}
