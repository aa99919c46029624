//! Raw convolution kernels shared by forward ops and their backward rules.
//!
//! All kernels accumulate each output element in a fixed sequential order
//! (input channel, then kernel row, then kernel column), so outputs are
//! bit-identical whether a kernel runs on one thread or many.

use crate::par::for_each_chunk;

pub type Shape = [usize; 4];

pub fn numel(shape: &Shape) -> usize {
    shape.iter().product()
}

/// Output spatial size of a strided convolution.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - k) / stride + 1
}

/// Output spatial size of a strided transposed convolution.
pub fn convt_out_dim(input: usize, k: usize, stride: usize, padding: usize) -> usize {
    (input - 1) * stride + k - 2 * padding
}

/// Dense 2-D convolution. `input` is NCHW, `weight` is [outC, inC, k, k],
/// `bias` has one entry per output channel.
///
/// Every output element accumulates its taps in (inC, ky, kx) order with
/// structurally-zero weights skipped, so results are bit-identical across
/// thread counts and across the whole-plane / per-row / cropped-window code
/// paths that share this ordering.
pub fn conv2d(
    input: &[f32],
    ishape: &Shape,
    weight: &[f32],
    wshape: &Shape,
    bias: &[f32],
    stride: usize,
    padding: usize,
) -> (Vec<f32>, Shape) {
    let [n, in_c, h, w] = *ishape;
    let [out_c, w_in_c, k, _] = *wshape;
    debug_assert_eq!(in_c, w_in_c);

    if let Some((w2, w2shape)) = phase_decompose_weight(wshape, weight, stride, padding, h, w) {
        // stride-2 conv as a stride-1 conv over space-to-depth phases
        let (in2, in2shape) = space_to_depth(input, ishape);
        return conv2d(&in2, &in2shape, &w2, &w2shape, bias, 1, 1);
    }

    let oh = conv_out_dim(h, k, stride, padding);
    let ow = conv_out_dim(w, k, stride, padding);
    let oshape = [n, out_c, oh, ow];
    let mut out = vec![0.0f32; numel(&oshape)];
    let work = numel(&oshape) * in_c * k * k;

    if stride == 1 && oh == h && ow == w {
        // same-size fast path: copy the input into a horizontally padded
        // scratch once per batch element, then every (ic, ky, kx) tap is a
        // single flat saxpy over the whole plane
        let wp = w + 2 * padding;
        let pad_plane = h * wp;
        for b in 0..n {
            let mut padded = vec![0.0f32; in_c * pad_plane + 2 * padding];
            for ic in 0..in_c {
                let src = &input[(b * in_c + ic) * h * w..][..h * w];
                let dst = &mut padded[padding + ic * pad_plane..];
                for row in 0..h {
                    dst[row * wp + padding..row * wp + padding + w]
                        .copy_from_slice(&src[row * w..row * w + w]);
                }
            }
            let out_b = &mut out[b * out_c * h * w..][..out_c * h * w];
            for_each_chunk(out_b, h * w, work / n, |oc, plane| {
                conv_plane_same(&padded, in_c, h, w, wp, weight, oc, k, padding, bias[oc], plane);
            });
        }
        return (out, oshape);
    }

    for_each_chunk(&mut out, ow, work, |row_idx, row| {
        // row_idx enumerates (b, oc, oy)
        let oy = row_idx % oh;
        let oc = (row_idx / oh) % out_c;
        let b = row_idx / (oh * out_c);
        let bias_v = bias[oc];
        for v in row.iter_mut() {
            *v = bias_v;
        }
        for ic in 0..in_c {
            let in_plane = &input[(b * in_c + ic) * h * w..][..h * w];
            let w_block = &weight[((oc * in_c + ic) * k) * k..][..k * k];
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let in_row = &in_plane[iy as usize * w..][..w];
                let w_row = &w_block[ky * k..][..k];
                if stride == 1 {
                    for (kx, &wv) in w_row.iter().enumerate() {
                        if wv == 0.0 {
                            continue;
                        }
                        // valid ox range: 0 <= ox + kx - padding < w
                        let lo = padding.saturating_sub(kx);
                        let hi = (w + padding - kx).min(ow);
                        if lo >= hi {
                            continue;
                        }
                        let src = &in_row[lo + kx - padding..hi + kx - padding];
                        let dst = &mut row[lo..hi];
                        for (d, s) in dst.iter_mut().zip(src.iter()) {
                            *d += wv * *s;
                        }
                    }
                } else {
                    for (kx, &wv) in w_row.iter().enumerate() {
                        if wv == 0.0 {
                            continue;
                        }
                        for (ox, d) in row.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix >= 0 && (ix as usize) < w {
                                *d += wv * in_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    (out, oshape)
}

/// One output plane of a stride-1, same-size convolution over the padded
/// input scratch. The scratch holds `in_c` planes of width `w + 2*padding`
/// with zeroed pad columns (plus `padding` floats of slack at both ends), so
/// every tap is a full-plane saxpy into a padded output scratch whose pad
/// columns are simply never copied out.
#[allow(clippy::too_many_arguments)]
fn conv_plane_same(
    padded: &[f32],
    in_c: usize,
    h: usize,
    w: usize,
    wp: usize,
    weight: &[f32],
    oc: usize,
    k: usize,
    padding: usize,
    bias_v: f32,
    plane: &mut [f32],
) {
    let p = padding;
    let pad_plane = h * wp;
    let mut scratch = vec![bias_v; pad_plane];
    for ic in 0..in_c {
        let w_block = &weight[((oc * in_c + ic) * k) * k..][..k * k];
        for ky in 0..k {
            let dy = ky as isize - p as isize;
            // valid output rows: 0 <= oy + dy < h
            let oy_lo = (-dy).max(0) as usize;
            let oy_hi = ((h as isize - dy).min(h as isize)).max(0) as usize;
            if oy_lo >= oy_hi {
                continue;
            }
            let w_row = &w_block[ky * k..][..k];
            for (kx, &wv) in w_row.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                // flat run over rows [oy_lo, oy_hi); horizontal pad columns
                // absorb the kx shift, vertical bounds restrict the rows
                let dst = &mut scratch[oy_lo * wp..oy_hi * wp];
                let src_start = ic * pad_plane + (oy_lo as isize + dy) as usize * wp + kx;
                let src = &padded[src_start..src_start + dst.len()];
                for (d, s) in dst.iter_mut().zip(src.iter()) {
                    *d += wv * *s;
                }
            }
        }
    }
    // copy the interior columns out
    for row in 0..h {
        plane[row * w..row * w + w].copy_from_slice(&scratch[row * wp + p..row * wp + p + w]);
    }
}

/// Rearrange a k x k stride-2 kernel (same-size-halving geometry: 2p = k-1,
/// k <= 5) into a 3x3 stride-1 kernel over the four space-to-depth phases.
/// Returns None when the transform does not apply.
fn phase_decompose_weight(
    wshape: &Shape,
    weight: &[f32],
    stride: usize,
    padding: usize,
    h: usize,
    w: usize,
) -> Option<(Vec<f32>, Shape)> {
    let [out_c, in_c, k, _] = *wshape;
    if stride != 2 || k > 5 || 2 * padding != k - 1 || h % 2 != 0 || w % 2 != 0 {
        return None;
    }
    let w2shape = [out_c, 4 * in_c, 3, 3];
    let mut w2 = vec![0.0f32; numel(&w2shape)];
    let p = padding as isize;
    for oc in 0..out_c {
        for ic in 0..in_c {
            for ky in 0..k {
                for kx in 0..k {
                    let dy = ky as isize - p;
                    let dx = kx as isize - p;
                    let ry = dy.rem_euclid(2);
                    let rx = dx.rem_euclid(2);
                    let a = ((dy - ry) / 2 + 1) as usize;
                    let b = ((dx - rx) / 2 + 1) as usize;
                    let phase = (ry * 2 + rx) as usize;
                    w2[((oc * 4 * in_c + ic * 4 + phase) * 3 + a) * 3 + b] =
                        weight[((oc * in_c + ic) * k + ky) * k + kx];
                }
            }
        }
    }
    Some((w2, w2shape))
}

/// Gradient of `conv2d` w.r.t. its input; also the core of the transposed
/// convolution forward pass.
pub fn conv2d_input_grad(
    grad_out: &[f32],
    oshape: &Shape,
    weight: &[f32],
    wshape: &Shape,
    stride: usize,
    padding: usize,
    ishape: &Shape,
) -> Vec<f32> {
    let [n, in_c, h, w] = *ishape;
    let [out_c, _, k, _] = *wshape;
    let [_, _, oh, ow] = *oshape;

    if let Some((w2, w2shape)) = phase_decompose_weight(wshape, weight, stride, padding, h, w) {
        let in2shape = [n, 4 * in_c, h / 2, w / 2];
        let din2 = conv2d_input_grad(grad_out, oshape, &w2, &w2shape, 1, 1, &in2shape);
        return depth_to_space(&din2, &in2shape).0;
    }

    let mut din = vec![0.0f32; numel(ishape)];
    let work = numel(oshape) * in_c * k * k;

    if stride == 1 && oh == h && ow == w {
        // same-size fast path: the input gradient is a correlation of the
        // output gradient with the flipped kernel; pad the grad planes and
        // run flat saxpies like the forward pass
        let p = padding;
        let wp = w + 2 * p;
        let pad_plane = h * wp;
        for b in 0..n {
            let mut padded = vec![0.0f32; out_c * pad_plane + 2 * p];
            for oc in 0..out_c {
                let src = &grad_out[(b * out_c + oc) * h * w..][..h * w];
                let dst = &mut padded[p + oc * pad_plane..];
                for row in 0..h {
                    dst[row * wp + p..row * wp + p + w]
                        .copy_from_slice(&src[row * w..row * w + w]);
                }
            }
            let din_b = &mut din[b * in_c * h * w..][..in_c * h * w];
            for_each_chunk(din_b, h * w, work / n, |ic, plane| {
                let mut scratch = vec![0.0f32; pad_plane];
                for oc in 0..out_c {
                    let w_block = &weight[((oc * in_c + ic) * k) * k..][..k * k];
                    for ky in 0..k {
                        // din(iy) draws from g(iy - ky + p)
                        let dy = p as isize - ky as isize;
                        let iy_lo = (-dy).max(0) as usize;
                        let iy_hi = ((h as isize - dy).min(h as isize)).max(0) as usize;
                        if iy_lo >= iy_hi {
                            continue;
                        }
                        let w_row = &w_block[ky * k..][..k];
                        for (kx, &wv) in w_row.iter().enumerate() {
                            if wv == 0.0 {
                                continue;
                            }
                            let dst = &mut scratch[iy_lo * wp..iy_hi * wp];
                            let src_start = oc * pad_plane
                                + (iy_lo as isize + dy) as usize * wp
                                + (k - 1 - kx);
                            let src = &padded[src_start..src_start + dst.len()];
                            for (d, s) in dst.iter_mut().zip(src.iter()) {
                                *d += wv * *s;
                            }
                        }
                    }
                }
                for row in 0..h {
                    plane[row * w..row * w + w]
                        .copy_from_slice(&scratch[row * wp + p..row * wp + p + w]);
                }
            });
        }
        return din;
    }

    for_each_chunk(&mut din, w, work, |row_idx, row| {
        // row_idx enumerates (b, ic, iy)
        let iy = row_idx % h;
        let ic = (row_idx / h) % in_c;
        let b = row_idx / (h * in_c);
        for oc in 0..out_c {
            let g_plane = &grad_out[(b * out_c + oc) * oh * ow..][..oh * ow];
            let w_block = &weight[((oc * in_c + ic) * k) * k..][..k * k];
            for ky in 0..k {
                // need oy with oy*stride + ky - padding == iy
                let t = iy as isize + padding as isize - ky as isize;
                if t < 0 || t % stride as isize != 0 {
                    continue;
                }
                let oy = (t / stride as isize) as usize;
                if oy >= oh {
                    continue;
                }
                let g_row = &g_plane[oy * ow..][..ow];
                let w_row = &w_block[ky * k..][..k];
                if stride == 1 {
                    for (kx, &wv) in w_row.iter().enumerate() {
                        let lo = padding.saturating_sub(kx);
                        let hi = (w + padding - kx).min(ow);
                        if lo >= hi {
                            continue;
                        }
                        let dst = &mut row[lo + kx - padding..hi + kx - padding];
                        let src = &g_row[lo..hi];
                        for (d, s) in dst.iter_mut().zip(src.iter()) {
                            *d += wv * *s;
                        }
                    }
                } else {
                    for (kx, &wv) in w_row.iter().enumerate() {
                        for (ox, &g) in g_row.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix >= 0 && (ix as usize) < w {
                                row[ix as usize] += wv * g;
                            }
                        }
                    }
                }
            }
        }
    });
    din
}

/// Gradient of `conv2d` w.r.t. its weight:
/// dW[oc, ic, ky, kx] = sum over (b, oy, ox) of g[b,oc,oy,ox] * in[b,ic,oy*s+ky-p,ox*s+kx-p].
pub fn conv2d_weight_grad(
    grad_out: &[f32],
    oshape: &Shape,
    input: &[f32],
    ishape: &Shape,
    wshape: &Shape,
    stride: usize,
    padding: usize,
) -> Vec<f32> {
    let [n, in_c, h, w] = *ishape;
    let [out_c, _, k, _] = *wshape;
    let [_, _, oh, ow] = *oshape;

    if stride == 2 && k <= 5 && 2 * padding == k - 1 && h % 2 == 0 && w % 2 == 0 {
        // gradient of the phase-decomposed stride-1 conv, mapped back onto
        // the original kernel taps (the structurally-zero phase taps are
        // simply dropped)
        let (in2, in2shape) = space_to_depth(input, ishape);
        let w2shape = [out_c, 4 * in_c, 3, 3];
        let dw2 = conv2d_weight_grad(grad_out, oshape, &in2, &in2shape, &w2shape, 1, 1);
        let mut dw = vec![0.0f32; numel(wshape)];
        let p = padding as isize;
        for oc in 0..out_c {
            for ic in 0..in_c {
                for ky in 0..k {
                    for kx in 0..k {
                        let dy = ky as isize - p;
                        let dx = kx as isize - p;
                        let ry = dy.rem_euclid(2);
                        let rx = dx.rem_euclid(2);
                        let a = ((dy - ry) / 2 + 1) as usize;
                        let b = ((dx - rx) / 2 + 1) as usize;
                        let phase = (ry * 2 + rx) as usize;
                        dw[((oc * in_c + ic) * k + ky) * k + kx] =
                            dw2[((oc * 4 * in_c + ic * 4 + phase) * 3 + a) * 3 + b];
                    }
                }
            }
        }
        return dw;
    }

    let mut dw = vec![0.0f32; numel(wshape)];
    let work = numel(oshape) * in_c * k * k;

    if stride == 1 && oh == h && ow == w {
        // same-size fast path: each dW tap is a flat dot between the padded
        // grad plane and a shifted padded input plane (pad columns of the
        // grad are zero, so they contribute nothing); batch elements
        // accumulate sequentially inside each (oc, ic) task
        let p = padding;
        let wp = w + 2 * p;
        let pad_plane = h * wp;
        let pad = |src_all: &[f32], channels: usize| {
            let mut padded = vec![0.0f32; n * channels * pad_plane + 2 * p];
            for bc in 0..n * channels {
                let src = &src_all[bc * h * w..][..h * w];
                let dst = &mut padded[p + bc * pad_plane..];
                for row in 0..h {
                    dst[row * wp + p..row * wp + p + w]
                        .copy_from_slice(&src[row * w..row * w + w]);
                }
            }
            padded
        };
        let g_pad = pad(grad_out, out_c);
        let in_pad = pad(input, in_c);
        for_each_chunk(&mut dw, k * k, work, |pair_idx, block| {
            let ic = pair_idx % in_c;
            let oc = pair_idx / in_c;
            for ky in 0..k {
                let dy = ky as isize - p as isize;
                let oy_lo = (-dy).max(0) as usize;
                let oy_hi = ((h as isize - dy).min(h as isize)).max(0) as usize;
                for kx in 0..k {
                    if oy_lo >= oy_hi {
                        block[ky * k + kx] = 0.0;
                        continue;
                    }
                    let mut acc = 0.0f32;
                    for b in 0..n {
                        let g_base = p + (b * out_c + oc) * pad_plane;
                        let g_slice = &g_pad[g_base + oy_lo * wp..g_base + oy_hi * wp];
                        let src_start = (b * in_c + ic) * pad_plane
                            + (oy_lo as isize + dy) as usize * wp
                            + kx;
                        let i_slice = &in_pad[src_start..src_start + g_slice.len()];
                        acc += dot8(g_slice, i_slice);
                    }
                    block[ky * k + kx] = acc;
                }
            }
        });
        return dw;
    }

    for_each_chunk(&mut dw, k * k, work, |pair_idx, block| {
        // pair_idx enumerates (oc, ic)
        let ic = pair_idx % in_c;
        let oc = pair_idx / in_c;
        for ky in 0..k {
            for kx in 0..k {
                let mut acc = 0.0f32;
                for b in 0..n {
                    let g_plane = &grad_out[(b * out_c + oc) * oh * ow..][..oh * ow];
                    let in_plane = &input[(b * in_c + ic) * h * w..][..h * w];
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let g_row = &g_plane[oy * ow..][..ow];
                        let in_row = &in_plane[iy as usize * w..][..w];
                        if stride == 1 {
                            let lo = padding.saturating_sub(kx);
                            let hi = (w + padding - kx).min(ow);
                            if lo < hi {
                                let g_s = &g_row[lo..hi];
                                let i_s = &in_row[lo + kx - padding..hi + kx - padding];
                                for (g, x) in g_s.iter().zip(i_s.iter()) {
                                    acc += *g * *x;
                                }
                            }
                        } else {
                            for (ox, &g) in g_row.iter().enumerate() {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix >= 0 && (ix as usize) < w {
                                    acc += g * in_row[ix as usize];
                                }
                            }
                        }
                    }
                }
                block[ky * k + kx] = acc;
            }
        }
    });
    dw
}

/// Parity-select merge: anchor positions ((h+w) even) read from `a`,
/// non-anchor positions from `b`.
pub fn mux_parity(a: &[f32], b: &[f32], shape: &Shape) -> Vec<f32> {
    let [n, c, h, w] = *shape;
    let mut out = vec![0.0f32; numel(shape)];
    for img in 0..n * c {
        let base = img * h * w;
        for y in 0..h {
            let row = base + y * w;
            for x in 0..w {
                let i = row + x;
                out[i] = if (y + x) % 2 == 0 { a[i] } else { b[i] };
            }
        }
    }
    out
}

/// (B, C, H, W) -> (B, 4C, H/2, W/2); out channel = c*4 + dy*2 + dx.
pub fn space_to_depth(input: &[f32], ishape: &Shape) -> (Vec<f32>, Shape) {
    let [n, c, h, w] = *ishape;
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    let (oh, ow) = (h / 2, w / 2);
    let oshape = [n, c * 4, oh, ow];
    let mut out = vec![0.0f32; numel(&oshape)];
    for b in 0..n {
        for ci in 0..c {
            let src = &input[(b * c + ci) * h * w..][..h * w];
            for dy in 0..2 {
                for dx in 0..2 {
                    let oc = ci * 4 + dy * 2 + dx;
                    let dst = &mut out[(b * c * 4 + oc) * oh * ow..][..oh * ow];
                    for y in 0..oh {
                        for x in 0..ow {
                            dst[y * ow + x] = src[(2 * y + dy) * w + 2 * x + dx];
                        }
                    }
                }
            }
        }
    }
    (out, oshape)
}

/// Exact inverse of [`space_to_depth`]: (B, 4C, H, W) -> (B, C, 2H, 2W).
pub fn depth_to_space(input: &[f32], ishape: &Shape) -> (Vec<f32>, Shape) {
    let [n, c4, h, w] = *ishape;
    debug_assert!(c4 % 4 == 0);
    let c = c4 / 4;
    let oshape = [n, c, h * 2, w * 2];
    let mut out = vec![0.0f32; numel(&oshape)];
    for b in 0..n {
        for ci in 0..c {
            let dst = &mut out[(b * c + ci) * h * 2 * w * 2..][..h * 2 * w * 2];
            for dy in 0..2 {
                for dx in 0..2 {
                    let ic = ci * 4 + dy * 2 + dx;
                    let src = &input[(b * c4 + ic) * h * w..][..h * w];
                    for y in 0..h {
                        for x in 0..w {
                            dst[(2 * y + dy) * 2 * w + 2 * x + dx] = src[y * w + x];
                        }
                    }
                }
            }
        }
    }
    (out, oshape)
}

/// Dot product with eight fixed-order accumulator lanes; deterministic for
/// a given length and SIMD-friendly.
fn dot8(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f32; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        for l in 0..8 {
            lanes[l] += a[i * 8 + l] * b[i * 8 + l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let s01 = lanes[0] + lanes[1];
    let s23 = lanes[2] + lanes[3];
    let s45 = lanes[4] + lanes[5];
    let s67 = lanes[6] + lanes[7];
    ((s01 + s23) + (s45 + s67)) + tail
}

/// Gradient of `conv2d` w.r.t. its bias: per-channel sum of the output grad.
pub fn conv2d_bias_grad(grad_out: &[f32], oshape: &Shape) -> Vec<f32> {
    let [n, out_c, oh, ow] = *oshape;
    let mut db = vec![0.0f32; out_c];
    for (oc, slot) in db.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for b in 0..n {
            let plane = &grad_out[(b * out_c + oc) * oh * ow..][..oh * ow];
            for &g in plane {
                acc += g as f64;
            }
        }
        *slot = acc as f32;
    }
    db
}
