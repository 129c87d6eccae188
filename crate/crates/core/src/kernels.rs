//! Numeric kernels shared by the tape and the inference path.
//!
//! Every kernel is a pure function of its inputs; backward passes recompute
//! whatever intermediate buffers they need (im2col matrices) instead of
//! caching them, which keeps graph nodes small.

use crate::tensor::{gemm, gemm_at, gemm_bt, Tensor};

// ---------------------------------------------------------------------------
// Standard convolution (cross-correlation, zero padding)
// ---------------------------------------------------------------------------

pub fn conv_out_hw(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1)
}

/// Unrolls `x` into a `[C*K*K, Ho*Wo]` patch matrix.
fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize) -> Vec<f64> {
    let (c_in, h, w) = x.chw();
    let (ho, wo) = conv_out_hw(h, w, k, stride, pad);
    let p = ho * wo;
    let mut cols = vec![0.0; c_in * k * k * p];
    let xd = x.data();
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * p;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = (c * h + iy as usize) * w;
                    let dst = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            cols[dst + ox] = xd[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatters a `[C*K*K, Ho*Wo]` gradient matrix back onto the input grid.
fn col2im(
    cols: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (ho, wo) = conv_out_hw(h, w, k, stride, pad);
    let p = ho * wo;
    let mut gx = Tensor::zeros(&[c_in, h, w]);
    let gxd = gx.data_mut();
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * p;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = (c * h + iy as usize) * w;
                    let src = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            gxd[dst + ix as usize] += cols[src + ox];
                        }
                    }
                }
            }
        }
    }
    gx
}

/// `y = w (*) x + b`. Weight is `[C_out, C_in, K, K]`, bias `[C_out]`.
pub fn conv2d_fwd(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (c_in, h, wi) = x.chw();
    let c_out = w.dims()[0];
    let k = w.dims()[2];
    assert_eq!(w.dims()[1], c_in, "conv weight in-channels");
    let (ho, wo) = conv_out_hw(h, wi, k, stride, pad);
    let p = ho * wo;
    let cols = im2col(x, k, stride, pad);
    let mut y = Tensor::zeros(&[c_out, ho, wo]);
    gemm(c_out, c_in * k * k, p, w.data(), &cols, 0.0, y.data_mut());
    if let Some(b) = b {
        let yd = y.data_mut();
        for o in 0..c_out {
            let bo = b.data()[o];
            for v in &mut yd[o * p..(o + 1) * p] {
                *v += bo;
            }
        }
    }
    y
}

/// Gradients of `conv2d_fwd` w.r.t. input, weight and bias.
pub fn conv2d_bwd(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
    with_bias: bool,
) -> (Tensor, Tensor, Option<Tensor>) {
    let (c_in, h, wi) = x.chw();
    let c_out = w.dims()[0];
    let k = w.dims()[2];
    let (ho, wo) = conv_out_hw(h, wi, k, stride, pad);
    let p = ho * wo;
    let ckk = c_in * k * k;

    let cols = im2col(x, k, stride, pad);
    let mut gw = Tensor::zeros(&[c_out, c_in, k, k]);
    gemm_bt(c_out, p, ckk, gy.data(), &cols, 0.0, gw.data_mut());

    let mut gcols = vec![0.0; ckk * p];
    gemm_at(ckk, c_out, p, w.data(), gy.data(), 0.0, &mut gcols);
    let gx = col2im(&gcols, c_in, h, wi, k, stride, pad);

    let gb = with_bias.then(|| {
        let mut gb = Tensor::zeros(&[c_out]);
        for o in 0..c_out {
            gb.data_mut()[o] = gy.data()[o * p..(o + 1) * p].iter().sum();
        }
        gb
    });
    (gx, gw, gb)
}

// ---------------------------------------------------------------------------
// Modulated deformable convolution (3x3, stride 1, same padding)
// ---------------------------------------------------------------------------

const DK: usize = 3;
const DTAPS: usize = DK * DK;

struct BilinearTap {
    y0: isize,
    x0: isize,
    fy: f64,
    fx: f64,
    inside: bool,
}

fn bilinear_tap(sy: f64, sx: f64, h: usize, w: usize) -> BilinearTap {
    let inside = sy > -1.0 && sy < h as f64 && sx > -1.0 && sx < w as f64;
    BilinearTap {
        y0: sy.floor() as isize,
        x0: sx.floor() as isize,
        fy: sy - sy.floor(),
        fx: sx - sx.floor(),
        inside,
    }
}

fn sample_at(xc: &[f64], h: usize, w: usize, t: &BilinearTap) -> f64 {
    if !t.inside {
        return 0.0;
    }
    let mut v = 0.0;
    let (y0, x0) = (t.y0, t.x0);
    let (y1, x1) = (y0 + 1, x0 + 1);
    let in_y0 = y0 >= 0 && y0 < h as isize;
    let in_y1 = y1 >= 0 && y1 < h as isize;
    let in_x0 = x0 >= 0 && x0 < w as isize;
    let in_x1 = x1 >= 0 && x1 < w as isize;
    if in_y0 && in_x0 {
        v += (1.0 - t.fy) * (1.0 - t.fx) * xc[y0 as usize * w + x0 as usize];
    }
    if in_y0 && in_x1 {
        v += (1.0 - t.fy) * t.fx * xc[y0 as usize * w + x1 as usize];
    }
    if in_y1 && in_x0 {
        v += t.fy * (1.0 - t.fx) * xc[y1 as usize * w + x0 as usize];
    }
    if in_y1 && in_x1 {
        v += t.fy * t.fx * xc[y1 as usize * w + x1 as usize];
    }
    v
}

/// Deformable patch matrix: `cols[(c*9+k), p] = mask[k,p] * sample(x_c, p+g_k+off_k(p))`.
///
/// Offsets are `[18, H, W]` with rows `2k` holding the vertical and `2k+1`
/// the horizontal displacement of tap `k`; `mask` is `[9, H, W]` already in
/// `[0, 1]`. Sampling is bilinear with zero outside the image.
fn deform_im2col(x: &Tensor, offs: &Tensor, mask: &Tensor) -> Vec<f64> {
    let (c_in, h, w) = x.chw();
    let p = h * w;
    let mut cols = vec![0.0; c_in * DTAPS * p];
    let xd = x.data();
    let od = offs.data();
    let md = mask.data();
    for k in 0..DTAPS {
        let (ky, kx) = (k / DK, k % DK);
        for oy in 0..h {
            for ox in 0..w {
                let pi = oy * w + ox;
                let sy = oy as f64 + ky as f64 - 1.0 + od[2 * k * p + pi];
                let sx = ox as f64 + kx as f64 - 1.0 + od[(2 * k + 1) * p + pi];
                let tap = bilinear_tap(sy, sx, h, w);
                if !tap.inside {
                    continue;
                }
                let m = md[k * p + pi];
                for c in 0..c_in {
                    cols[(c * DTAPS + k) * p + pi] = m * sample_at(&xd[c * p..(c + 1) * p], h, w, &tap);
                }
            }
        }
    }
    cols
}

pub fn deform_conv2d_fwd(
    x: &Tensor,
    offs: &Tensor,
    mask: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
) -> Tensor {
    let (c_in, h, wi) = x.chw();
    let c_out = w.dims()[0];
    assert_eq!(w.dims()[1], c_in, "deform conv weight in-channels");
    assert_eq!(w.dims()[2], DK, "deform conv supports 3x3 kernels only");
    assert_eq!(offs.dims(), &[2 * DTAPS, h, wi], "offset shape");
    assert_eq!(mask.dims(), &[DTAPS, h, wi], "mask shape");
    let p = h * wi;
    let cols = deform_im2col(x, offs, mask);
    let mut y = Tensor::zeros(&[c_out, h, wi]);
    gemm(c_out, c_in * DTAPS, p, w.data(), &cols, 0.0, y.data_mut());
    if let Some(b) = b {
        let yd = y.data_mut();
        for o in 0..c_out {
            let bo = b.data()[o];
            for v in &mut yd[o * p..(o + 1) * p] {
                *v += bo;
            }
        }
    }
    y
}

#[allow(clippy::type_complexity)]
pub fn deform_conv2d_bwd(
    x: &Tensor,
    offs: &Tensor,
    mask: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    with_bias: bool,
) -> (Tensor, Tensor, Tensor, Tensor, Option<Tensor>) {
    let (c_in, h, wi) = x.chw();
    let c_out = w.dims()[0];
    let p = h * wi;
    let ckk = c_in * DTAPS;

    let cols = deform_im2col(x, offs, mask);
    let mut gw = Tensor::zeros(&[c_out, c_in, DK, DK]);
    gemm_bt(c_out, p, ckk, gy.data(), &cols, 0.0, gw.data_mut());

    let mut gcols = vec![0.0; ckk * p];
    gemm_at(ckk, c_out, p, w.data(), gy.data(), 0.0, &mut gcols);

    let mut gx = Tensor::zeros(&[c_in, h, wi]);
    let mut goffs = Tensor::zeros(&[2 * DTAPS, h, wi]);
    let mut gmask = Tensor::zeros(&[DTAPS, h, wi]);
    let xd = x.data();
    let od = offs.data();
    let md = mask.data();

    for k in 0..DTAPS {
        let (ky, kx) = (k / DK, k % DK);
        for oy in 0..h {
            for ox in 0..wi {
                let pi = oy * wi + ox;
                let sy = oy as f64 + ky as f64 - 1.0 + od[2 * k * p + pi];
                let sx = ox as f64 + kx as f64 - 1.0 + od[(2 * k + 1) * p + pi];
                let tap = bilinear_tap(sy, sx, h, wi);
                if !tap.inside {
                    continue;
                }
                let m = md[k * p + pi];
                let (y0, x0) = (tap.y0, tap.x0);
                let (y1, x1) = (y0 + 1, x0 + 1);
                let in_y0 = y0 >= 0 && y0 < h as isize;
                let in_y1 = y1 >= 0 && y1 < h as isize;
                let in_x0 = x0 >= 0 && x0 < wi as isize;
                let in_x1 = x1 >= 0 && x1 < wi as isize;
                let (fy, fx) = (tap.fy, tap.fx);

                let mut gm = 0.0;
                let mut gdy = 0.0;
                let mut gdx = 0.0;
                for c in 0..c_in {
                    let gc = gcols[(c * DTAPS + k) * p + pi];
                    if gc == 0.0 {
                        continue;
                    }
                    let xc = &xd[c * p..(c + 1) * p];
                    let v00 = if in_y0 && in_x0 { xc[y0 as usize * wi + x0 as usize] } else { 0.0 };
                    let v01 = if in_y0 && in_x1 { xc[y0 as usize * wi + x1 as usize] } else { 0.0 };
                    let v10 = if in_y1 && in_x0 { xc[y1 as usize * wi + x0 as usize] } else { 0.0 };
                    let v11 = if in_y1 && in_x1 { xc[y1 as usize * wi + x1 as usize] } else { 0.0 };

                    let v = (1.0 - fy) * (1.0 - fx) * v00
                        + (1.0 - fy) * fx * v01
                        + fy * (1.0 - fx) * v10
                        + fy * fx * v11;
                    gm += gc * v;

                    let gv = gc * m;
                    let gxc = gx.data_mut();
                    let base = c * p;
                    if in_y0 && in_x0 {
                        gxc[base + y0 as usize * wi + x0 as usize] += gv * (1.0 - fy) * (1.0 - fx);
                    }
                    if in_y0 && in_x1 {
                        gxc[base + y0 as usize * wi + x1 as usize] += gv * (1.0 - fy) * fx;
                    }
                    if in_y1 && in_x0 {
                        gxc[base + y1 as usize * wi + x0 as usize] += gv * fy * (1.0 - fx);
                    }
                    if in_y1 && in_x1 {
                        gxc[base + y1 as usize * wi + x1 as usize] += gv * fy * fx;
                    }

                    gdy += gv * ((v10 - v00) * (1.0 - fx) + (v11 - v01) * fx);
                    gdx += gv * ((v01 - v00) * (1.0 - fy) + (v11 - v10) * fy);
                }
                gmask.data_mut()[k * p + pi] = gm;
                goffs.data_mut()[2 * k * p + pi] = gdy;
                goffs.data_mut()[(2 * k + 1) * p + pi] = gdx;
            }
        }
    }

    let gb = with_bias.then(|| {
        let mut gb = Tensor::zeros(&[c_out]);
        for o in 0..c_out {
            gb.data_mut()[o] = gy.data()[o * p..(o + 1) * p].iter().sum();
        }
        gb
    });
    (gx, goffs, gmask, gw, gb)
}

// ---------------------------------------------------------------------------
// Bilinear resampling (exact x0.5 and x2, half-pixel centers, clamped edges)
// ---------------------------------------------------------------------------

/// x0.5 with half-pixel centers reduces to a 2x2 box average.
pub fn resize_half_fwd(x: &Tensor) -> Tensor {
    let (c, h, w) = x.chw();
    assert!(h % 2 == 0 && w % 2 == 0, "resize_half on odd dims");
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[c, ho, wo]);
    let xd = x.data();
    let yd = y.data_mut();
    for ci in 0..c {
        for oy in 0..ho {
            let r0 = (ci * h + 2 * oy) * w;
            let r1 = r0 + w;
            let out = (ci * ho + oy) * wo;
            for ox in 0..wo {
                let i = 2 * ox;
                yd[out + ox] = 0.25 * (xd[r0 + i] + xd[r0 + i + 1] + xd[r1 + i] + xd[r1 + i + 1]);
            }
        }
    }
    y
}

pub fn resize_half_bwd(gy: &Tensor) -> Tensor {
    let (c, ho, wo) = gy.chw();
    let (h, w) = (ho * 2, wo * 2);
    let mut gx = Tensor::zeros(&[c, h, w]);
    let gyd = gy.data();
    let gxd = gx.data_mut();
    for ci in 0..c {
        for oy in 0..ho {
            let r0 = (ci * h + 2 * oy) * w;
            let r1 = r0 + w;
            let src = (ci * ho + oy) * wo;
            for ox in 0..wo {
                let g = 0.25 * gyd[src + ox];
                let i = 2 * ox;
                gxd[r0 + i] += g;
                gxd[r0 + i + 1] += g;
                gxd[r1 + i] += g;
                gxd[r1 + i + 1] += g;
            }
        }
    }
    gx
}

/// Per-axis source taps for an exact x2 upsample of `n` input samples.
fn up2_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let src = src.max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn resize_double_fwd(x: &Tensor) -> Tensor {
    let (c, h, w) = x.chw();
    let (ho, wo) = (h * 2, w * 2);
    let ty = up2_taps(h);
    let tx = up2_taps(w);
    let mut y = Tensor::zeros(&[c, ho, wo]);
    let xd = x.data();
    let yd = y.data_mut();
    for ci in 0..c {
        let base = ci * h * w;
        for oy in 0..ho {
            let (y0, y1, fy) = ty[oy];
            let out = (ci * ho + oy) * wo;
            for ox in 0..wo {
                let (x0, x1, fx) = tx[ox];
                let v00 = xd[base + y0 * w + x0];
                let v01 = xd[base + y0 * w + x1];
                let v10 = xd[base + y1 * w + x0];
                let v11 = xd[base + y1 * w + x1];
                yd[out + ox] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                    + fy * ((1.0 - fx) * v10 + fx * v11);
            }
        }
    }
    y
}

pub fn resize_double_bwd(gy: &Tensor) -> Tensor {
    let (c, ho, wo) = gy.chw();
    let (h, w) = (ho / 2, wo / 2);
    let ty = up2_taps(h);
    let tx = up2_taps(w);
    let mut gx = Tensor::zeros(&[c, h, w]);
    let gyd = gy.data();
    let gxd = gx.data_mut();
    for ci in 0..c {
        let base = ci * h * w;
        for oy in 0..ho {
            let (y0, y1, fy) = ty[oy];
            let src = (ci * ho + oy) * wo;
            for ox in 0..wo {
                let (x0, x1, fx) = tx[ox];
                let g = gyd[src + ox];
                gxd[base + y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                gxd[base + y0 * w + x1] += g * (1.0 - fy) * fx;
                gxd[base + y1 * w + x0] += g * fy * (1.0 - fx);
                gxd[base + y1 * w + x1] += g * fy * fx;
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Per-channel statistics over the spatial extent: `(mean, 1/sqrt(var+eps))`.
pub fn channel_stats(x: &Tensor, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let (c, h, w) = x.chw();
    let n = (h * w) as f64;
    let xd = x.data();
    let mut means = Vec::with_capacity(c);
    let mut inv_stds = Vec::with_capacity(c);
    for ci in 0..c {
        let s = &xd[ci * h * w..(ci + 1) * h * w];
        let mean = s.iter().sum::<f64>() / n;
        let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        means.push(mean);
        inv_stds.push(1.0 / (var + eps).sqrt());
    }
    (means, inv_stds)
}

/// `y[c] = gamma[c] * (x[c] - mean[c]) * inv_std[c] + beta[c]` per channel.
pub fn instance_norm_fwd(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let (c, h, w) = x.chw();
    let (means, inv_stds) = channel_stats(x, eps);
    let mut y = Tensor::zeros(&[c, h, w]);
    let xd = x.data();
    let yd = y.data_mut();
    for ci in 0..c {
        let (g, b) = (gamma.data()[ci], beta.data()[ci]);
        let (m, is) = (means[ci], inv_stds[ci]);
        for i in ci * h * w..(ci + 1) * h * w {
            yd[i] = g * (xd[i] - m) * is + b;
        }
    }
    y
}

pub fn instance_norm_bwd(
    x: &Tensor,
    gamma: &Tensor,
    eps: f64,
    gy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (c, h, w) = x.chw();
    let n = (h * w) as f64;
    let (means, inv_stds) = channel_stats(x, eps);
    let mut gx = Tensor::zeros(&[c, h, w]);
    let mut ggamma = Tensor::zeros(&[c]);
    let mut gbeta = Tensor::zeros(&[c]);
    let xd = x.data();
    let gyd = gy.data();
    for ci in 0..c {
        let (m, is) = (means[ci], inv_stds[ci]);
        let g = gamma.data()[ci];
        let range = ci * h * w..(ci + 1) * h * w;
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for i in range.clone() {
            let xhat = (xd[i] - m) * is;
            sum_g += gyd[i];
            sum_gx += gyd[i] * xhat;
        }
        ggamma.data_mut()[ci] = sum_gx;
        gbeta.data_mut()[ci] = sum_g;
        let mean_g = sum_g / n;
        let mean_gx = sum_gx / n;
        for i in range {
            let xhat = (xd[i] - m) * is;
            gx.data_mut()[i] = g * is * (gyd[i] - mean_g - xhat * mean_gx);
        }
    }
    (gx, ggamma, gbeta)
}

/// Layer normalization across every element (used on `[C,1,1]` context vectors).
pub fn layer_norm_fwd(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let n = x.len() as f64;
    let mean = x.data().iter().sum::<f64>() / n;
    let var = x.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let is = 1.0 / (var + eps).sqrt();
    let mut y = x.clone();
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        *v = gamma.data()[i] * (x.data()[i] - mean) * is + beta.data()[i];
    }
    y
}

pub fn layer_norm_bwd(x: &Tensor, gamma: &Tensor, eps: f64, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let n = x.len() as f64;
    let mean = x.data().iter().sum::<f64>() / n;
    let var = x.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let is = 1.0 / (var + eps).sqrt();

    let mut ggamma = Tensor::zeros(&[x.len()]);
    let mut gbeta = Tensor::zeros(&[x.len()]);
    let mut sum_h = 0.0; // sum of gy*gamma
    let mut sum_hx = 0.0; // sum of gy*gamma*xhat
    for i in 0..x.len() {
        let xhat = (x.data()[i] - mean) * is;
        ggamma.data_mut()[i] = gy.data()[i] * xhat;
        gbeta.data_mut()[i] = gy.data()[i];
        sum_h += gy.data()[i] * gamma.data()[i];
        sum_hx += gy.data()[i] * gamma.data()[i] * xhat;
    }
    let mut gx = Tensor::zeros(x.dims());
    for i in 0..x.len() {
        let xhat = (x.data()[i] - mean) * is;
        gx.data_mut()[i] =
            is * (gy.data()[i] * gamma.data()[i] - sum_h / n - xhat * sum_hx / n);
    }
    (gx, ggamma, gbeta)
}

// ---------------------------------------------------------------------------
// Spatial softmax attention pooling (global context)
// ---------------------------------------------------------------------------

/// Softmax over all spatial positions of a `[1, H, W]` logit map.
pub fn spatial_softmax(logits: &Tensor) -> Vec<f64> {
    let ld = logits.data();
    let max = ld.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut a: Vec<f64> = ld.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = a.iter().sum();
    for v in &mut a {
        *v /= sum;
    }
    a
}

/// `ctx[c] = sum_p softmax(logits)_p * x[c, p]`, returned as `[C, 1, 1]`.
pub fn attn_pool_fwd(x: &Tensor, logits: &Tensor) -> Tensor {
    let (c, h, w) = x.chw();
    assert_eq!(logits.dims(), &[1, h, w], "attention logit shape");
    let a = spatial_softmax(logits);
    let p = h * w;
    let mut ctx = Tensor::zeros(&[c, 1, 1]);
    let xd = x.data();
    for ci in 0..c {
        ctx.data_mut()[ci] = xd[ci * p..(ci + 1) * p]
            .iter()
            .zip(a.iter())
            .map(|(&v, &w)| v * w)
            .sum();
    }
    ctx
}

pub fn attn_pool_bwd(x: &Tensor, logits: &Tensor, gctx: &Tensor) -> (Tensor, Tensor) {
    let (c, h, w) = x.chw();
    let p = h * w;
    let a = spatial_softmax(logits);
    let xd = x.data();

    // ctx recomputed for the softmax jacobian term
    let mut ctx = vec![0.0; c];
    for ci in 0..c {
        ctx[ci] = xd[ci * p..(ci + 1) * p]
            .iter()
            .zip(a.iter())
            .map(|(&v, &w)| v * w)
            .sum();
    }
    let dot_gc: f64 = (0..c).map(|ci| gctx.data()[ci] * ctx[ci]).sum();

    let mut gx = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        let g = gctx.data()[ci];
        for pi in 0..p {
            gx.data_mut()[ci * p + pi] = g * a[pi];
        }
    }
    let mut glogits = Tensor::zeros(&[1, h, w]);
    for pi in 0..p {
        let gsum: f64 = (0..c).map(|ci| gctx.data()[ci] * xd[ci * p + pi]).sum();
        glogits.data_mut()[pi] = a[pi] * (gsum - dot_gc);
    }
    (gx, glogits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        let mut t = Tensor::zeros(&[c, h, w]);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = i as f64 * 0.01 + (i % 7) as f64 * 0.1;
        }
        t
    }

    fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
        let (c_in, h, wi) = x.chw();
        let c_out = w.dims()[0];
        let k = w.dims()[2];
        let (ho, wo) = conv_out_hw(h, wi, k, stride, pad);
        let mut y = Tensor::zeros(&[c_out, ho, wo]);
        for o in 0..c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wi as isize {
                                    acc += w.data()[((o * c_in + c) * k + ky) * k + kx]
                                        * x.data()[(c * h + iy as usize) * wi + ix as usize];
                                }
                            }
                        }
                    }
                    y.data_mut()[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_reference() {
        let x = ramp(3, 6, 5);
        let mut w = Tensor::zeros(&[4, 3, 3, 3]);
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            *v = ((i as f64) * 0.7).sin() * 0.3;
        }
        let b = Tensor::from_vec(&[4], vec![0.1, -0.2, 0.3, 0.0]);
        for &stride in &[1usize, 2] {
            let fast = conv2d_fwd(&x, &w, Some(&b), stride, 1);
            let slow = naive_conv(&x, &w, Some(&b), stride, 1);
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn conv_1x1_identity_weights_reproduce_input() {
        let x = ramp(3, 4, 4);
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let y = conv2d_fwd(&x, &w, None, 1, 0);
        assert!(y.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn conv_zero_weights_zero_output() {
        let x = ramp(4, 8, 8);
        let w = Tensor::zeros(&[32, 4, 3, 3]);
        let b = Tensor::zeros(&[32]);
        let y = conv2d_fwd(&x, &w, Some(&b), 1, 1);
        assert_eq!(y.dims(), &[32, 8, 8]);
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn deform_with_zero_offsets_matches_conv_times_mask() {
        let x = ramp(2, 8, 8);
        let mut w = Tensor::zeros(&[3, 2, 3, 3]);
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            *v = ((i as f64) * 1.3).cos() * 0.2;
        }
        let offs = Tensor::zeros(&[18, 8, 8]);
        let mask = Tensor::filled(&[9, 8, 8], 0.5);
        let y = deform_conv2d_fwd(&x, &offs, &mask, &w, None);
        let conv = conv2d_fwd(&x, &w, None, 1, 1);
        let half = conv.map(|v| v * 0.5);
        assert!(y.max_abs_diff(&half) < 1e-12);
    }

    #[test]
    fn deform_identity_kernel_center_tap_reproduces_input() {
        let x = ramp(1, 6, 6);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0; // center tap
        let offs = Tensor::zeros(&[18, 6, 6]);
        let mask = Tensor::filled(&[9, 6, 6], 1.0);
        let y = deform_conv2d_fwd(&x, &offs, &mask, &w, None);
        assert!(y.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn deform_constant_shift_on_ramp_adds_slope() {
        // f(y, x) = x; shifting the sampling point one pixel right adds 1.
        let h = 6;
        let mut x = Tensor::zeros(&[1, h, h]);
        for y in 0..h {
            for xx in 0..h {
                x.data_mut()[y * h + xx] = xx as f64;
            }
        }
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let mut offs = Tensor::zeros(&[18, h, h]);
        // center tap is k=4; its horizontal offset lives in row 2*4+1
        for p in 0..h * h {
            offs.data_mut()[9 * h * h + p] = 1.0;
        }
        let mask = Tensor::filled(&[9, h, h], 1.0);
        let y = deform_conv2d_fwd(&x, &offs, &mask, &w, None);
        for row in 0..h {
            for col in 0..h - 1 {
                let got = y.data()[row * h + col];
                assert!((got - (col as f64 + 1.0)).abs() < 1e-12, "at ({row},{col}): {got}");
            }
        }
    }

    #[test]
    fn resize_half_of_constant_is_constant() {
        let x = Tensor::filled(&[2, 8, 6], 0.37);
        let y = resize_half_fwd(&x);
        assert_eq!(y.dims(), &[2, 4, 3]);
        assert!(y.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn down_then_up_reproduces_ramp_interior() {
        let (h, w) = (8, 8);
        let mut x = Tensor::zeros(&[1, h, w]);
        for y in 0..h {
            for xx in 0..w {
                x.data_mut()[y * w + xx] = 0.2 + 0.05 * y as f64 + 0.03 * xx as f64;
            }
        }
        let rt = resize_double_fwd(&resize_half_fwd(&x));
        for y in 1..h - 1 {
            for xx in 1..w - 1 {
                let diff = (rt.data()[y * w + xx] - x.data()[y * w + xx]).abs();
                assert!(diff < 1e-6, "interior mismatch {diff} at ({y},{xx})");
            }
        }
    }

    #[test]
    fn softmax_weights_sum_to_one() {
        let mut logits = Tensor::zeros(&[1, 5, 7]);
        for (i, v) in logits.data_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin() * 3.0;
        }
        let a = spatial_softmax(&logits);
        let sum: f64 = a.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn attn_pool_constant_input_returns_channel_values() {
        let mut x = Tensor::zeros(&[3, 4, 4]);
        for c in 0..3 {
            for p in 0..16 {
                x.data_mut()[c * 16 + p] = 0.1 + c as f64 * 0.4;
            }
        }
        let mut logits = Tensor::zeros(&[1, 4, 4]);
        for (i, v) in logits.data_mut().iter_mut().enumerate() {
            *v = i as f64 * 0.21;
        }
        let ctx = attn_pool_fwd(&x, &logits);
        for c in 0..3 {
            assert!((ctx.data()[c] - (0.1 + c as f64 * 0.4)).abs() < 1e-12);
        }
    }

    #[test]
    fn instance_norm_constant_channel_maps_to_beta() {
        let x = Tensor::filled(&[2, 4, 4], 0.7);
        let gamma = Tensor::filled(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let y = instance_norm_fwd(&x, &gamma, &beta, 1e-5);
        assert!(y.max_abs() < 1e-9);
    }
}
