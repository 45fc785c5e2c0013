//! Forward operators and their reverse-mode gradients.
//!
//! Convolution uses the cross-correlation convention (no kernel flip) at
//! stride 1 with `(k - 1) / 2` zero padding. Every reduction accumulates in
//! f64 with a single fixed, output-stationary summation order per element
//! (input channel major, then kernel row, then kernel column), so results
//! are bit-reproducible regardless of thread count.

use super::{BNParams, ConvParams, Tensor};
use crate::error::{Error, Result};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

fn check_conv_shapes(x: &Tensor, p: &ConvParams) -> Result<(usize, usize, usize, usize, usize, usize)> {
    p.validate()?;
    let [n, c_in, h, w] = x.shape();
    let [c_out, w_cin, k, _] = p.weight.shape();
    if c_in != w_cin {
        return Err(Error::invalid_argument(format!(
            "conv2d channel mismatch: input shape {:?} vs weight shape {:?}",
            x.shape(),
            p.weight.shape()
        )));
    }
    Ok((n, c_in, h, w, c_out, k))
}

/// Accumulates `tile[oh, ow] += wv * plane[oh + kh - pad, ow + kw - pad]`
/// over the region where the source index is in bounds.
#[inline]
fn accumulate_shifted(
    tile: &mut [f64],
    plane: &[f32],
    wv: f64,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
) {
    let oh0 = pad.saturating_sub(kh);
    let oh1 = (h + pad).saturating_sub(kh).min(h);
    let ow0 = pad.saturating_sub(kw);
    let ow1 = (w + pad).saturating_sub(kw).min(w);
    if ow0 >= ow1 {
        return;
    }
    for oh in oh0..oh1 {
        let sh = oh + kh - pad;
        let src = &plane[sh * w + ow0 + kw - pad..sh * w + ow1 + kw - pad];
        let dst = &mut tile[oh * w + ow0..oh * w + ow1];
        for (d, s) in dst.iter_mut().zip(src) {
            *d += wv * f64::from(*s);
        }
    }
}

/// One fused row of a 3-tap pad-1 horizontal pass:
/// `dst[j] += w0 * src[j-1] + w1 * src[j] + w2 * src[j+1]` with clipped
/// borders. Tap order per element is fixed (w0, w1, w2), which keeps the
/// summation deterministic for a given build.
#[inline]
fn row_pass_3tap(dst: &mut [f64], src: &[f32], w0: f64, w1: f64, w2: f64) {
    let w = dst.len();
    debug_assert_eq!(src.len(), w);
    if w == 1 {
        dst[0] += w1 * f64::from(src[0]);
        return;
    }
    dst[0] += w1 * f64::from(src[0]) + w2 * f64::from(src[1]);
    let interior = &mut dst[1..w - 1];
    let s0 = &src[0..w - 2];
    let s1 = &src[1..w - 1];
    let s2 = &src[2..w];
    for i in 0..interior.len() {
        interior[i] += w0 * f64::from(s0[i]) + w1 * f64::from(s1[i]) + w2 * f64::from(s2[i]);
    }
    dst[w - 1] += w0 * f64::from(src[w - 2]) + w1 * f64::from(src[w - 1]);
}

/// All nine taps of a pad-1 3x3 kernel applied to one output row in a
/// single pass. `rows[kh]` is the source row `oh + kh - 1` when in
/// bounds. Per-element tap order is (kh, kw) ascending and fixed.
#[inline]
fn row_pass_9tap(dst: &mut [f64], rows: [Option<&[f32]>; 3], w: &[f64; 9]) {
    for (kh, row) in rows.iter().enumerate() {
        if let Some(src) = row {
            row_pass_3tap(dst, src, w[3 * kh], w[3 * kh + 1], w[3 * kh + 2]);
        }
    }
}

/// Like [`row_pass_9tap`] but with all three source rows present,
/// fused into one loop over the row interior so the destination stays in
/// registers across all nine taps.
#[inline]
fn row_pass_9tap_full(dst: &mut [f64], top: &[f32], mid: &[f32], bot: &[f32], w: &[f64; 9]) {
    let n = dst.len();
    if n < 2 {
        row_pass_9tap(dst, [Some(top), Some(mid), Some(bot)], w);
        return;
    }
    // left border: kw = 0 taps fall outside
    dst[0] += w[1] * f64::from(top[0])
        + w[2] * f64::from(top[1])
        + w[4] * f64::from(mid[0])
        + w[5] * f64::from(mid[1])
        + w[7] * f64::from(bot[0])
        + w[8] * f64::from(bot[1]);
    {
        let interior = &mut dst[1..n - 1];
        let (t0, t1, t2) = (&top[0..n - 2], &top[1..n - 1], &top[2..n]);
        let (m0, m1, m2) = (&mid[0..n - 2], &mid[1..n - 1], &mid[2..n]);
        let (b0, b1, b2) = (&bot[0..n - 2], &bot[1..n - 1], &bot[2..n]);
        for i in 0..interior.len() {
            interior[i] += (w[0] * f64::from(t0[i])
                + w[1] * f64::from(t1[i])
                + w[2] * f64::from(t2[i]))
                + (w[3] * f64::from(m0[i])
                    + w[4] * f64::from(m1[i])
                    + w[5] * f64::from(m2[i]))
                + (w[6] * f64::from(b0[i])
                    + w[7] * f64::from(b1[i])
                    + w[8] * f64::from(b2[i]));
        }
    }
    dst[n - 1] += w[0] * f64::from(top[n - 2])
        + w[1] * f64::from(top[n - 1])
        + w[3] * f64::from(mid[n - 2])
        + w[4] * f64::from(mid[n - 1])
        + w[6] * f64::from(bot[n - 2])
        + w[7] * f64::from(bot[n - 1]);
}

/// Runs the fused 3x3 pass of one source plane into the accumulation tile.
#[inline]
fn conv3_plane_pass(scratch: &mut [f64], plane: &[f32], h: usize, w: usize, taps: &[f64; 9]) {
    let row = |i: usize| &plane[i * w..(i + 1) * w];
    if h == 1 {
        row_pass_9tap(&mut scratch[0..w], [None, Some(row(0)), None], taps);
        return;
    }
    row_pass_9tap(&mut scratch[0..w], [None, Some(row(0)), Some(row(1))], taps);
    for oh in 1..h - 1 {
        row_pass_9tap_full(
            &mut scratch[oh * w..(oh + 1) * w],
            row(oh - 1),
            row(oh),
            row(oh + 1),
            taps,
        );
    }
    row_pass_9tap(
        &mut scratch[(h - 1) * w..h * w],
        [Some(row(h - 2)), Some(row(h - 1)), None],
        taps,
    );
}

fn conv2d_plane(
    out_plane: &mut [f32],
    x: &Tensor,
    p: &ConvParams,
    ni: usize,
    co: usize,
    scratch: &mut Vec<f64>,
) {
    let [_, c_in, h, w] = x.shape();
    let k = p.kernel_size();
    let pad = (k - 1) / 2;
    scratch.clear();
    scratch.resize(h * w, 0.0);
    let wdata = p.weight.data();
    for ci in 0..c_in {
        let plane = &x.data()[(ni * c_in + ci) * h * w..][..h * w];
        if k == 3 {
            let base = (co * c_in + ci) * 9;
            let mut taps = [0f64; 9];
            for (t, v) in taps.iter_mut().zip(&wdata[base..base + 9]) {
                *t = f64::from(*v);
            }
            conv3_plane_pass(scratch, plane, h, w, &taps);
        } else {
            for kh in 0..k {
                for kw in 0..k {
                    let wv = f64::from(wdata[((co * c_in + ci) * k + kh) * k + kw]);
                    accumulate_shifted(scratch, plane, wv, h, w, kh, kw, pad);
                }
            }
        }
    }
    let b = f64::from(p.bias.data()[co]);
    for (o, acc) in out_plane.iter_mut().zip(scratch.iter()) {
        *o = (acc + b) as f32;
    }
}

/// 2-D convolution, stride 1, same-size output.
pub fn conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let (n, _, h, w, c_out, _) = check_conv_shapes(x, p)?;
    let mut out = Tensor::zeros([n, c_out, h, w]);
    let plane = h * w;

    #[cfg(feature = "parallel")]
    {
        out.data_mut()
            .par_chunks_mut(plane)
            .enumerate()
            .for_each_init(Vec::new, |scratch, (idx, out_plane)| {
                conv2d_plane(out_plane, x, p, idx / c_out, idx % c_out, scratch);
            });
    }
    #[cfg(not(feature = "parallel"))]
    {
        let mut scratch = Vec::new();
        for (idx, out_plane) in out.data_mut().chunks_mut(plane).enumerate() {
            conv2d_plane(out_plane, x, p, idx / c_out, idx % c_out, &mut scratch);
        }
    }
    Ok(out)
}

/// Gradients of `sum(grad_out * conv2d(x, p))` with respect to the input,
/// the weight, and the bias.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub x: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

fn conv2d_grad_x_plane(
    gx_plane: &mut [f32],
    grad_out: &Tensor,
    p: &ConvParams,
    ni: usize,
    ci: usize,
    scratch: &mut Vec<f64>,
) {
    let [_, c_out, h, w] = grad_out.shape();
    let c_in = p.in_channels();
    let k = p.kernel_size();
    let pad = (k - 1) / 2;
    scratch.clear();
    scratch.resize(h * w, 0.0);
    let wdata = p.weight.data();
    for co in 0..c_out {
        let gplane = &grad_out.data()[(ni * c_out + co) * h * w..][..h * w];
        // d out[oh, ow] / d x[ih, iw] is nonzero when ih = oh + kh - pad,
        // i.e. grad_x[ih, iw] += w * grad_out[ih + pad - kh, iw + pad - kw]:
        // the same shifted accumulation with the kernel offset mirrored.
        if k == 3 {
            // the backward pass is a 3x3 correlation with the fully
            // mirrored kernel (both axes reversed)
            let base = (co * c_in + ci) * 9;
            let mut taps = [0f64; 9];
            for (i, t) in taps.iter_mut().enumerate() {
                *t = f64::from(wdata[base + 8 - i]);
            }
            conv3_plane_pass(scratch, gplane, h, w, &taps);
        } else {
            for kh in 0..k {
                for kw in 0..k {
                    let wv = f64::from(wdata[((co * c_in + ci) * k + kh) * k + kw]);
                    accumulate_shifted(scratch, gplane, wv, h, w, k - 1 - kh, k - 1 - kw, pad);
                }
            }
        }
    }
    for (o, acc) in gx_plane.iter_mut().zip(scratch.iter()) {
        *o = *acc as f32;
    }
}

/// Dot product of two f32 slices accumulated in f64 over eight fixed
/// lanes, combined in a fixed tree. The lane pattern is deterministic and
/// lets the reduction vectorize.
#[inline]
fn dot_lanes(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0f64; 8];
    let chunks = a.len() / 8;
    for k in 0..chunks {
        for j in 0..8 {
            lanes[j] += f64::from(a[8 * k + j]) * f64::from(b[8 * k + j]);
        }
    }
    let mut tail = 0f64;
    for i in 8 * chunks..a.len() {
        tail += f64::from(a[i]) * f64::from(b[i]);
    }
    (((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])))
        + tail
}

/// Lane-accumulated sum of an f32 slice in f64.
#[inline]
fn sum_lanes(a: &[f32]) -> f64 {
    let mut lanes = [0f64; 8];
    let chunks = a.len() / 8;
    for k in 0..chunks {
        for j in 0..8 {
            lanes[j] += f64::from(a[8 * k + j]);
        }
    }
    let mut tail = 0f64;
    for v in &a[8 * chunks..] {
        tail += f64::from(*v);
    }
    (((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])))
        + tail
}

/// One row's contribution to the three column-shift correlations of a
/// pad-1 3x3 kernel: returns `(sum g[j] * x[j-1], sum g[j] * x[j],
/// sum g[j] * x[j+1])` with clipped borders, lane-accumulated in f64.
#[inline]
fn row_corr_3(g: &[f32], x: &[f32]) -> (f64, f64, f64) {
    let w = g.len();
    debug_assert_eq!(x.len(), w);
    if w == 1 {
        return (0.0, f64::from(g[0]) * f64::from(x[0]), 0.0);
    }
    let mut l0 = [0f64; 4];
    let mut l1 = [0f64; 4];
    let mut l2 = [0f64; 4];
    // interior: j in 1..w-1 so all three shifts are in bounds
    let gi = &g[1..w - 1];
    let x0 = &x[0..w - 2];
    let x1 = &x[1..w - 1];
    let x2 = &x[2..w];
    let chunks = gi.len() / 4;
    for k in 0..chunks {
        for j in 0..4 {
            let gv = f64::from(gi[4 * k + j]);
            l0[j] += gv * f64::from(x0[4 * k + j]);
            l1[j] += gv * f64::from(x1[4 * k + j]);
            l2[j] += gv * f64::from(x2[4 * k + j]);
        }
    }
    let (mut t0, mut t1, mut t2) = (0f64, 0f64, 0f64);
    for i in 4 * chunks..gi.len() {
        let gv = f64::from(gi[i]);
        t0 += gv * f64::from(x0[i]);
        t1 += gv * f64::from(x1[i]);
        t2 += gv * f64::from(x2[i]);
    }
    let s0 = ((l0[0] + l0[1]) + (l0[2] + l0[3])) + t0;
    let s1 = ((l1[0] + l1[1]) + (l1[2] + l1[3])) + t1;
    let s2 = ((l2[0] + l2[1]) + (l2[2] + l2[3])) + t2;
    // borders: g[0] sees x[0] (center) and x[1] (right); g[w-1] sees
    // x[w-2] (left) and x[w-1] (center)
    let gl = f64::from(g[0]);
    let gr = f64::from(g[w - 1]);
    (
        s0 + gr * f64::from(x[w - 2]),
        s1 + gl * f64::from(x[0]) + gr * f64::from(x[w - 1]),
        s2 + gl * f64::from(x[1]),
    )
}

fn conv2d_grad_w_row(
    gw_row: &mut [f32],
    gb: &mut f32,
    x: &Tensor,
    grad_out: &Tensor,
    co: usize,
    k: usize,
) {
    let [n, c_in, h, w] = x.shape();
    let c_out = grad_out.shape()[1];
    let pad = (k - 1) / 2;
    let mut bias_acc = 0f64;
    let mut acc = vec![0f64; c_in * k * k];
    for ni in 0..n {
        let gplane = &grad_out.data()[(ni * c_out + co) * h * w..][..h * w];
        bias_acc += sum_lanes(gplane);
        for ci in 0..c_in {
            let xplane = &x.data()[(ni * c_in + ci) * h * w..][..h * w];
            if k == 3 {
                for kh in 0..3 {
                    let oh0 = 1usize.saturating_sub(kh);
                    let oh1 = (h + 1).saturating_sub(kh).min(h);
                    let (mut a0, mut a1, mut a2) = (0f64, 0f64, 0f64);
                    for oh in oh0..oh1 {
                        let sh = oh + kh - 1;
                        let (s0, s1, s2) = row_corr_3(
                            &gplane[oh * w..(oh + 1) * w],
                            &xplane[sh * w..(sh + 1) * w],
                        );
                        a0 += s0;
                        a1 += s1;
                        a2 += s2;
                    }
                    let base = (ci * 3 + kh) * 3;
                    acc[base] += a0;
                    acc[base + 1] += a1;
                    acc[base + 2] += a2;
                }
            } else {
                for kh in 0..k {
                    for kw in 0..k {
                        let oh0 = pad.saturating_sub(kh);
                        let oh1 = (h + pad).saturating_sub(kh).min(h);
                        let ow0 = pad.saturating_sub(kw);
                        let ow1 = (w + pad).saturating_sub(kw).min(w);
                        if ow0 >= ow1 {
                            continue;
                        }
                        let mut s = 0f64;
                        for oh in oh0..oh1 {
                            let sh = oh + kh - pad;
                            let xs = &xplane[sh * w + ow0 + kw - pad..sh * w + ow1 + kw - pad];
                            let gs = &gplane[oh * w + ow0..oh * w + ow1];
                            s += dot_lanes(xs, gs);
                        }
                        acc[(ci * k + kh) * k + kw] += s;
                    }
                }
            }
        }
    }
    for (o, a) in gw_row.iter_mut().zip(acc.iter()) {
        *o = *a as f32;
    }
    *gb = bias_acc as f32;
}

pub fn conv2d_grad(x: &Tensor, p: &ConvParams, grad_out: &Tensor) -> Result<ConvGrads> {
    let (n, c_in, h, w, c_out, k) = check_conv_shapes(x, p)?;
    if grad_out.shape() != [n, c_out, h, w] {
        return Err(Error::invalid_argument(format!(
            "conv2d_grad: grad_out shape {:?} does not match output shape {:?}",
            grad_out.shape(),
            [n, c_out, h, w]
        )));
    }

    let mut grad_x = Tensor::zeros(x.shape());
    let plane = h * w;
    #[cfg(feature = "parallel")]
    {
        grad_x
            .data_mut()
            .par_chunks_mut(plane)
            .enumerate()
            .for_each_init(Vec::new, |scratch, (idx, gx_plane)| {
                conv2d_grad_x_plane(gx_plane, grad_out, p, idx / c_in, idx % c_in, scratch);
            });
    }
    #[cfg(not(feature = "parallel"))]
    {
        let mut scratch = Vec::new();
        for (idx, gx_plane) in grad_x.data_mut().chunks_mut(plane).enumerate() {
            conv2d_grad_x_plane(gx_plane, grad_out, p, idx / c_in, idx % c_in, &mut scratch);
        }
    }

    let mut grad_w = Tensor::zeros(p.weight.shape());
    let mut grad_b = Tensor::zeros([c_out, 1, 1, 1]);
    let row = c_in * k * k;
    #[cfg(feature = "parallel")]
    {
        grad_w
            .data_mut()
            .par_chunks_mut(row)
            .zip(grad_b.data_mut().par_iter_mut())
            .enumerate()
            .for_each(|(co, (gw_row, gb))| conv2d_grad_w_row(gw_row, gb, x, grad_out, co, k));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (co, (gw_row, gb)) in grad_w
            .data_mut()
            .chunks_mut(row)
            .zip(grad_b.data_mut().iter_mut())
            .enumerate()
        {
            conv2d_grad_w_row(gw_row, gb, x, grad_out, co, k);
        }
    }

    Ok(ConvGrads {
        x: grad_x,
        weight: grad_w,
        bias: grad_b,
    })
}

/// Forward mode for [`batch_norm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics, update running statistics, and
    /// cache what the backward pass needs.
    Train,
    /// Normalize with running statistics; nothing is mutated.
    Eval,
    /// Forward-only statistics refresh: normalize with batch statistics and
    /// update running statistics, but cache nothing.
    Recalibrate,
}

/// Batch statistics cached by a train-mode forward.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub inv_std: Vec<f32>,
}

fn batch_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = x.shape();
    let count = (n * h * w) as f64;
    let plane = h * w;
    let mut mean = vec![0f64; c];
    let mut var = vec![0f64; c];
    for ci in 0..c {
        let mut s = 0f64;
        for ni in 0..n {
            s += sum_lanes(&x.data()[(ni * c + ci) * plane..][..plane]);
        }
        mean[ci] = s / count;
    }
    for ci in 0..c {
        let m = mean[ci];
        let mut s = 0f64;
        for ni in 0..n {
            let chunk = &x.data()[(ni * c + ci) * plane..][..plane];
            // lane accumulation of squared deviations, fixed tree
            let mut lanes = [0f64; 8];
            let chunks = chunk.len() / 8;
            for k in 0..chunks {
                for j in 0..8 {
                    let d = f64::from(chunk[8 * k + j]) - m;
                    lanes[j] += d * d;
                }
            }
            let mut tail = 0f64;
            for v in &chunk[8 * chunks..] {
                let d = f64::from(*v) - m;
                tail += d * d;
            }
            s += (((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
                + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])))
                + tail;
        }
        var[ci] = s / count;
    }
    (mean, var)
}

/// Batch normalization over the channel axis.
///
/// Running statistics update as `running <- (1 - momentum) * running +
/// momentum * batch`; the running variance uses the unbiased batch variance
/// when more than one element per channel is available.
pub fn batch_norm(x: &Tensor, p: &mut BNParams, mode: BnMode) -> Result<(Tensor, Option<BnCache>)> {
    p.validate()?;
    let [n, c, h, w] = x.shape();
    if c != p.channels() {
        return Err(Error::invalid_argument(format!(
            "batch_norm channel mismatch: input has {} channels, params have {}",
            c,
            p.channels()
        )));
    }
    let plane = h * w;
    let count = n * plane;
    if count == 0 {
        return Err(Error::invalid_argument(
            "batch_norm on empty tensor",
        ));
    }

    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        BnMode::Train | BnMode::Recalibrate => batch_stats(x),
        BnMode::Eval => (
            p.running_mean.data().iter().map(|&v| f64::from(v)).collect(),
            p.running_var.data().iter().map(|&v| f64::from(v)).collect(),
        ),
    };

    let eps = f64::from(p.eps);
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();

    let mut out = Tensor::zeros(x.shape());
    for ni in 0..n {
        for ci in 0..c {
            let g = f64::from(p.gamma.data()[ci]);
            let b = f64::from(p.beta.data()[ci]);
            let m = mean[ci];
            let is = inv_std[ci];
            let src = &x.data()[(ni * c + ci) * plane..][..plane];
            let dst = &mut out.data_mut()[(ni * c + ci) * plane..][..plane];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (g * ((f64::from(*s) - m) * is) + b) as f32;
            }
        }
    }

    if matches!(mode, BnMode::Train | BnMode::Recalibrate) {
        let mom = f64::from(p.momentum);
        let unbias = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        for ci in 0..c {
            let rm = f64::from(p.running_mean.data()[ci]);
            let rv = f64::from(p.running_var.data()[ci]);
            p.running_mean.data_mut()[ci] = ((1.0 - mom) * rm + mom * mean[ci]) as f32;
            p.running_var.data_mut()[ci] = ((1.0 - mom) * rv + mom * var[ci] * unbias) as f32;
        }
    }

    let cache = if mode == BnMode::Train {
        Some(BnCache {
            mean: mean.iter().map(|&v| v as f32).collect(),
            var: var.iter().map(|&v| v as f32).collect(),
            inv_std: inv_std.iter().map(|&v| v as f32).collect(),
        })
    } else {
        None
    };
    Ok((out, cache))
}

#[derive(Debug, Clone)]
pub struct BnGrads {
    pub x: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Backward pass of [`batch_norm`].
///
/// Train mode differentiates through the batch statistics and requires the
/// cache from the corresponding forward; eval mode treats the running
/// statistics as constants.
pub fn batch_norm_grad(
    x: &Tensor,
    p: &BNParams,
    grad_out: &Tensor,
    mode: BnMode,
    cache: Option<&BnCache>,
) -> Result<BnGrads> {
    let [n, c, h, w] = x.shape();
    if grad_out.shape() != x.shape() {
        return Err(Error::invalid_argument(format!(
            "batch_norm_grad: grad_out shape {:?} does not match input shape {:?}",
            grad_out.shape(),
            x.shape()
        )));
    }
    if c != p.channels() {
        return Err(Error::invalid_argument(format!(
            "batch_norm_grad channel mismatch: input has {} channels, params have {}",
            c,
            p.channels()
        )));
    }
    let plane = h * w;
    let count = (n * plane) as f64;

    let (mean, inv_std): (Vec<f64>, Vec<f64>) = match mode {
        BnMode::Train => {
            let cache = cache.ok_or_else(|| {
                Error::invalid_state(
                    "train-mode batch_norm backward requires the cached batch statistics",
                )
            })?;
            (
                cache.mean.iter().map(|&v| f64::from(v)).collect(),
                cache.inv_std.iter().map(|&v| f64::from(v)).collect(),
            )
        }
        BnMode::Eval => {
            let eps = f64::from(p.eps);
            (
                p.running_mean.data().iter().map(|&v| f64::from(v)).collect(),
                p.running_var
                    .data()
                    .iter()
                    .map(|&v| 1.0 / (f64::from(v) + eps).sqrt())
                    .collect(),
            )
        }
        BnMode::Recalibrate => {
            return Err(Error::invalid_state(
                "recalibrate-mode forward computes no gradients",
            ))
        }
    };

    let mut grad_x = Tensor::zeros(x.shape());
    let mut grad_gamma = Tensor::zeros([c, 1, 1, 1]);
    let mut grad_beta = Tensor::zeros([c, 1, 1, 1]);

    for ci in 0..c {
        let m = mean[ci];
        let is = inv_std[ci];
        let g = f64::from(p.gamma.data()[ci]);

        let mut sum_g = 0f64;
        let mut sum_gx = 0f64;
        for ni in 0..n {
            let xs = &x.data()[(ni * c + ci) * plane..][..plane];
            let gs = &grad_out.data()[(ni * c + ci) * plane..][..plane];
            for (xv, gv) in xs.iter().zip(gs) {
                let xhat = (f64::from(*xv) - m) * is;
                sum_g += f64::from(*gv);
                sum_gx += f64::from(*gv) * xhat;
            }
        }
        grad_beta.data_mut()[ci] = sum_g as f32;
        grad_gamma.data_mut()[ci] = sum_gx as f32;

        match mode {
            BnMode::Train => {
                let mg = sum_g / count;
                let mgx = sum_gx / count;
                for ni in 0..n {
                    let xs = &x.data()[(ni * c + ci) * plane..][..plane];
                    let gs = &grad_out.data()[(ni * c + ci) * plane..][..plane];
                    let dst = &mut grad_x.data_mut()[(ni * c + ci) * plane..][..plane];
                    for ((d, xv), gv) in dst.iter_mut().zip(xs).zip(gs) {
                        let xhat = (f64::from(*xv) - m) * is;
                        *d = (g * is * (f64::from(*gv) - mg - xhat * mgx)) as f32;
                    }
                }
            }
            BnMode::Eval => {
                let scale = g * is;
                for ni in 0..n {
                    let gs = &grad_out.data()[(ni * c + ci) * plane..][..plane];
                    let dst = &mut grad_x.data_mut()[(ni * c + ci) * plane..][..plane];
                    for (d, gv) in dst.iter_mut().zip(gs) {
                        *d = (scale * f64::from(*gv)) as f32;
                    }
                }
            }
            BnMode::Recalibrate => unreachable!(),
        }
    }

    Ok(BnGrads {
        x: grad_x,
        gamma: grad_gamma,
        beta: grad_beta,
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// ReLU gradient; the subgradient at exactly zero is zero.
pub fn relu_grad(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if x.shape() != grad_out.shape() {
        return Err(Error::invalid_argument(format!(
            "relu_grad shape mismatch: {:?} vs {:?}",
            x.shape(),
            grad_out.shape()
        )));
    }
    let mut out = Tensor::zeros(x.shape());
    for ((d, xv), gv) in out
        .data_mut()
        .iter_mut()
        .zip(x.data())
        .zip(grad_out.data())
    {
        *d = if *xv > 0.0 { *gv } else { 0.0 };
    }
    Ok(out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::invalid_argument(format!(
            "add shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(a.shape());
    for ((d, av), bv) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *d = av + bv;
    }
    Ok(out)
}

/// Rearranges `(N, C*r^2, H, W)` into `(N, C, r*H, r*W)` with channel-major
/// grouping: `out[n, c, r*i + a, r*j + b] = in[n, c*r^2 + a*r + b, i, j]`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::invalid_argument(format!(
            "pixel_shuffle: {} channels not divisible by r^2 = {}",
            c,
            r * r
        )));
    }
    let co = c / (r * r);
    let mut out = Tensor::zeros([n, co, h * r, w * r]);
    for ni in 0..n {
        for cc in 0..co {
            for a in 0..r {
                for b in 0..r {
                    let cin = cc * r * r + a * r + b;
                    for i in 0..h {
                        let src = &x.data()[((ni * c + cin) * h + i) * w..][..w];
                        let base = ((ni * co + cc) * (h * r) + (r * i + a)) * (w * r) + b;
                        let dst = &mut out.data_mut()[base..];
                        for (j, s) in src.iter().enumerate() {
                            dst[r * j] = *s;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`pixel_shuffle`]; also the gradient routing of its
/// backward pass.
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let [n, c, hr, wr] = x.shape();
    if r == 0 || hr % r != 0 || wr % r != 0 {
        return Err(Error::invalid_argument(format!(
            "pixel_unshuffle: spatial dims {:?} not divisible by r = {}",
            [hr, wr],
            r
        )));
    }
    let (h, w) = (hr / r, wr / r);
    let co = c * r * r;
    let mut out = Tensor::zeros([n, co, h, w]);
    for ni in 0..n {
        for cc in 0..c {
            for a in 0..r {
                for b in 0..r {
                    let cout = cc * r * r + a * r + b;
                    for i in 0..h {
                        let src_base = ((ni * c + cc) * hr + (r * i + a)) * wr + b;
                        let src = &x.data()[src_base..];
                        let dst = &mut out.data_mut()[((ni * co + cout) * h + i) * w..][..w];
                        for (j, d) in dst.iter_mut().enumerate() {
                            *d = src[r * j];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
