//! Forward and backward compute kernels.
//!
//! All kernels are deterministic: reductions run in a fixed order, and
//! rayon parallelism only ever splits over disjoint output slices.

use crate::numerics::real::Real;
use rayon::prelude::*;

/// Below this output size the rayon dispatch overhead is not worth it.
const PAR_THRESHOLD: usize = 1 << 12;

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

pub fn conv2d_out_dims(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1)
}

/// Valid output-x range for a kernel column: every ox in lo..hi reads an
/// in-bounds input column `ox * stride + kx - pad`.
#[inline]
fn ox_range(wo: usize, w: usize, kx: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    if w + pad <= kx {
        return (0, 0);
    }
    let hi = (((w + pad - kx - 1) / stride) + 1).min(wo);
    (lo.min(hi), hi)
}

/// Lane-split dot product; fixed lane count keeps the reduction order
/// deterministic while letting the element loop vectorize.
#[inline]
fn dot8<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let mut lanes = [T::zero(); 8];
    let chunks = n / 8;
    for k in 0..chunks {
        for j in 0..8 {
            lanes[j] = lanes[j] + a[8 * k + j] * b[8 * k + j];
        }
    }
    let mut acc = T::zero();
    for lane in lanes {
        acc = acc + lane;
    }
    for i in 8 * chunks..n {
        acc = acc + a[i] * b[i];
    }
    acc
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Real>(
    x: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    wt: &[T],
    (o, kh, kw): (usize, usize, usize),
    bias: &[T],
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let (ho, wo) = conv2d_out_dims(h, w, kh, kw, stride, pad);
    let mut out = vec![T::zero(); n * o * ho * wo];
    let plane = ho * wo;
    // Loop order: per output element the taps still accumulate in
    // (ci, ky, kx) order on top of the bias, so results are identical to
    // the naive per-pixel formulation; the kx-major layout exists so the
    // inner ox sweep is a contiguous axpy the compiler can vectorize.
    let body = |(idx, out_plane): (usize, &mut [T])| {
        let ni = idx / o;
        let oi = idx % o;
        let xn = &x[ni * c * h * w..(ni + 1) * c * h * w];
        let wo_base = &wt[oi * c * kh * kw..(oi + 1) * c * kh * kw];
        for v in out_plane.iter_mut() {
            *v = bias[oi];
        }
        for ci in 0..c {
            let xc = &xn[ci * h * w..(ci + 1) * h * w];
            let wc = &wo_base[ci * kh * kw..(ci + 1) * kh * kw];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wc[ky * kw + kx];
                    let (ox_lo, ox_hi) = ox_range(wo, w, kx, stride, pad);
                    for oy in 0..ho {
                        let iy = oy * stride + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let xrow = &xc[(iy - pad) * w..(iy - pad + 1) * w];
                        let orow = &mut out_plane[oy * wo..(oy + 1) * wo];
                        if stride == 1 {
                            let ix0 = ox_lo + kx - pad;
                            let len = ox_hi - ox_lo;
                            let src = &xrow[ix0..ix0 + len];
                            let dst = &mut orow[ox_lo..ox_hi];
                            for j in 0..len {
                                dst[j] = dst[j] + src[j] * wv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                orow[ox] = orow[ox] + xrow[ox * stride + kx - pad] * wv;
                            }
                        }
                    }
                }
            }
        }
    };
    if out.len() >= PAR_THRESHOLD && n * o > 1 {
        out.par_chunks_mut(plane).enumerate().for_each(body);
    } else {
        out.chunks_mut(plane).enumerate().for_each(body);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_input<T: Real>(
    go: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    wt: &[T],
    (o, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let (ho, wo) = conv2d_out_dims(h, w, kh, kw, stride, pad);
    let mut gx = vec![T::zero(); n * c * h * w];
    let plane = c * h * w;
    // Mirrors the forward layout: for each tap, the ox sweep writes a
    // contiguous input row so the inner loop is a vectorizable axpy.
    let body = |(ni, gxn): (usize, &mut [T])| {
        for oi in 0..o {
            let gon = &go[(ni * o + oi) * ho * wo..(ni * o + oi + 1) * ho * wo];
            let wo_base = &wt[oi * c * kh * kw..(oi + 1) * c * kh * kw];
            for ci in 0..c {
                let wc = &wo_base[ci * kh * kw..(ci + 1) * kh * kw];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wc[ky * kw + kx];
                        let (ox_lo, ox_hi) = ox_range(wo, w, kx, stride, pad);
                        for oy in 0..ho {
                            let iy = oy * stride + ky;
                            if iy < pad || iy >= h + pad {
                                continue;
                            }
                            let grow = &gon[oy * wo..(oy + 1) * wo];
                            let xbase = ci * h * w + (iy - pad) * w;
                            if stride == 1 {
                                let ix0 = ox_lo + kx - pad;
                                let len = ox_hi - ox_lo;
                                let src = &grow[ox_lo..ox_hi];
                                let dst = &mut gxn[xbase + ix0..xbase + ix0 + len];
                                for j in 0..len {
                                    dst[j] = dst[j] + src[j] * wv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let slot = xbase + ox * stride + kx - pad;
                                    gxn[slot] = gxn[slot] + grow[ox] * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    };
    if gx.len() >= PAR_THRESHOLD && n > 1 {
        gx.par_chunks_mut(plane).enumerate().for_each(body);
    } else {
        gx.chunks_mut(plane).enumerate().for_each(body);
    }
    gx
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_weight<T: Real>(
    go: &[T],
    x: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    (o, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> (Vec<T>, Vec<T>) {
    let (ho, wo) = conv2d_out_dims(h, w, kh, kw, stride, pad);
    let mut gw = vec![T::zero(); o * c * kh * kw];
    let mut gb = vec![T::zero(); o];
    let plane = c * kh * kw;
    // Each weight tap reduces over the whole output plane; with stride 1
    // every row pair is contiguous, so the reduction is a lane-split dot.
    let body = |(oi, gwo): (usize, &mut [T])| {
        for ni in 0..n {
            let gon = &go[(ni * o + oi) * ho * wo..(ni * o + oi + 1) * ho * wo];
            let xn = &x[ni * c * h * w..(ni + 1) * c * h * w];
            for ci in 0..c {
                let xc = &xn[ci * h * w..(ci + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let (ox_lo, ox_hi) = ox_range(wo, w, kx, stride, pad);
                        let mut acc = T::zero();
                        for oy in 0..ho {
                            let iy = oy * stride + ky;
                            if iy < pad || iy >= h + pad {
                                continue;
                            }
                            let grow = &gon[oy * wo..(oy + 1) * wo];
                            let xrow = &xc[(iy - pad) * w..(iy - pad + 1) * w];
                            if stride == 1 {
                                let ix0 = ox_lo + kx - pad;
                                acc = acc
                                    + dot8(&grow[ox_lo..ox_hi], &xrow[ix0..ix0 + ox_hi - ox_lo]);
                            } else {
                                for ox in ox_lo..ox_hi {
                                    acc = acc + grow[ox] * xrow[ox * stride + kx - pad];
                                }
                            }
                        }
                        let slot = ci * kh * kw + ky * kw + kx;
                        gwo[slot] = gwo[slot] + acc;
                    }
                }
            }
        }
    };
    if gw.len() * n >= PAR_THRESHOLD && o > 1 {
        gw.par_chunks_mut(plane).enumerate().for_each(body);
    } else {
        gw.chunks_mut(plane).enumerate().for_each(body);
    }
    for ni in 0..n {
        for oi in 0..o {
            let gon = &go[(ni * o + oi) * ho * wo..(ni * o + oi + 1) * ho * wo];
            let mut acc = T::zero();
            for &g in gon {
                acc = acc + g;
            }
            gb[oi] = gb[oi] + acc;
        }
    }
    (gw, gb)
}

// ---------------------------------------------------------------------------
// linear (rows x d_in  ->  rows x d_out)
// ---------------------------------------------------------------------------

pub fn linear_forward<T: Real>(
    x: &[T],
    rows: usize,
    d_in: usize,
    wt: &[T],
    d_out: usize,
    bias: &[T],
) -> Vec<T> {
    let mut out = vec![T::zero(); rows * d_out];
    let body = |(r, out_row): (usize, &mut [T])| {
        let xr = &x[r * d_in..(r + 1) * d_in];
        for o in 0..d_out {
            let wr = &wt[o * d_in..(o + 1) * d_in];
            out_row[o] = bias[o] + dot8(xr, wr);
        }
    };
    if out.len() >= PAR_THRESHOLD && rows > 1 {
        out.par_chunks_mut(d_out).enumerate().for_each(body);
    } else {
        out.chunks_mut(d_out).enumerate().for_each(body);
    }
    out
}

pub fn linear_backward<T: Real>(
    go: &[T],
    x: &[T],
    rows: usize,
    d_in: usize,
    wt: &[T],
    d_out: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); rows * d_in];
    let mut gw = vec![T::zero(); d_out * d_in];
    let mut gb = vec![T::zero(); d_out];
    for r in 0..rows {
        let gr = &go[r * d_out..(r + 1) * d_out];
        let gxr = &mut gx[r * d_in..(r + 1) * d_in];
        for o in 0..d_out {
            let g = gr[o];
            let wr = &wt[o * d_in..(o + 1) * d_in];
            for i in 0..d_in {
                gxr[i] = gxr[i] + g * wr[i];
            }
        }
    }
    for o in 0..d_out {
        let gwo = &mut gw[o * d_in..(o + 1) * d_in];
        let mut accb = T::zero();
        for r in 0..rows {
            let g = go[r * d_out + o];
            accb = accb + g;
            let xr = &x[r * d_in..(r + 1) * d_in];
            for i in 0..d_in {
                gwo[i] = gwo[i] + g * xr[i];
            }
        }
        gb[o] = accb;
    }
    (gx, gw, gb)
}

// ---------------------------------------------------------------------------
// group normalization
// ---------------------------------------------------------------------------

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Returns (out, per-group inv_std, per-group mean) for backward reuse.
pub fn group_norm_forward<T: Real>(
    x: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    groups: usize,
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cg = c / groups;
    let m = cg * h * w;
    let mt = T::from_f64(m as f64);
    let eps = T::from_f64(GROUP_NORM_EPS);
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); n * groups];
    let mut means = vec![T::zero(); n * groups];
    for ni in 0..n {
        for gi in 0..groups {
            let base = ni * c * h * w + gi * cg * h * w;
            let seg = &x[base..base + m];
            let mut mean = T::zero();
            for &v in seg {
                mean = mean + v;
            }
            mean = mean / mt;
            let mut var = T::zero();
            for &v in seg {
                let d = v - mean;
                var = var + d * d;
            }
            var = var / mt;
            let s = T::one() / (var + eps).sqrt();
            inv_std[ni * groups + gi] = s;
            means[ni * groups + gi] = mean;
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let g = gamma[ch];
                let b = beta[ch];
                for j in 0..h * w {
                    let idx = base + ci * h * w + j;
                    out[idx] = (x[idx] - mean) * s * g + b;
                }
            }
        }
    }
    (out, inv_std, means)
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Real>(
    go: &[T],
    x: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    groups: usize,
    gamma: &[T],
    inv_std: &[T],
    means: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cg = c / groups;
    let m = cg * h * w;
    let mt = T::from_f64(m as f64);
    let mut gx = vec![T::zero(); x.len()];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for ni in 0..n {
        for gi in 0..groups {
            let base = ni * c * h * w + gi * cg * h * w;
            let s = inv_std[ni * groups + gi];
            let mean = means[ni * groups + gi];
            // dxhat plus the two reduction terms of the normalization backward
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for ci in 0..cg {
                let ch = gi * cg + ci;
                for j in 0..h * w {
                    let idx = base + ci * h * w + j;
                    let xhat = (x[idx] - mean) * s;
                    let dxh = go[idx] * gamma[ch];
                    sum_dxhat = sum_dxhat + dxh;
                    sum_dxhat_xhat = sum_dxhat_xhat + dxh * xhat;
                    ggamma[ch] = ggamma[ch] + go[idx] * xhat;
                    gbeta[ch] = gbeta[ch] + go[idx];
                }
            }
            let mean_dxhat = sum_dxhat / mt;
            let mean_dxhat_xhat = sum_dxhat_xhat / mt;
            for ci in 0..cg {
                let ch = gi * cg + ci;
                for j in 0..h * w {
                    let idx = base + ci * h * w + j;
                    let xhat = (x[idx] - mean) * s;
                    let dxh = go[idx] * gamma[ch];
                    gx[idx] = s * (dxh - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
        }
    }
    (gx, ggamma, gbeta)
}

// ---------------------------------------------------------------------------
// attention (single head, scaled dot product)
// ---------------------------------------------------------------------------

/// q: [n, lq, d], k: [n, lk, d], v: [n, lk, dv].
/// Returns (out [n, lq, dv], attn [n, lq, lk]).
pub fn attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    (n, lq, lk, d, dv): (usize, usize, usize, usize, usize),
) -> (Vec<T>, Vec<T>) {
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let mut out = vec![T::zero(); n * lq * dv];
    let mut attn = vec![T::zero(); n * lq * lk];
    for ni in 0..n {
        let qn = &q[ni * lq * d..(ni + 1) * lq * d];
        let kn = &k[ni * lk * d..(ni + 1) * lk * d];
        let vn = &v[ni * lk * dv..(ni + 1) * lk * dv];
        for qi in 0..lq {
            let qrow = &qn[qi * d..(qi + 1) * d];
            let arow = &mut attn[(ni * lq + qi) * lk..(ni * lq + qi + 1) * lk];
            let mut maxv = T::neg_infinity();
            for ki in 0..lk {
                let krow = &kn[ki * d..(ki + 1) * d];
                let s = dot8(qrow, krow) * scale;
                arow[ki] = s;
                if s > maxv {
                    maxv = s;
                }
            }
            let mut z = T::zero();
            for a in arow.iter_mut() {
                *a = (*a - maxv).exp();
                z = z + *a;
            }
            for a in arow.iter_mut() {
                *a = *a / z;
            }
            let orow = &mut out[(ni * lq + qi) * dv..(ni * lq + qi + 1) * dv];
            for ki in 0..lk {
                let a = arow[ki];
                let vrow = &vn[ki * dv..(ki + 1) * dv];
                for i in 0..dv {
                    orow[i] = orow[i] + a * vrow[i];
                }
            }
        }
    }
    (out, attn)
}

/// Backward through softmax(qk^T/sqrt(d)) v.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Real>(
    go: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    attn: &[T],
    (n, lq, lk, d, dv): (usize, usize, usize, usize, usize),
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let mut gq = vec![T::zero(); n * lq * d];
    let mut gk = vec![T::zero(); n * lk * d];
    let mut gv = vec![T::zero(); n * lk * dv];
    for ni in 0..n {
        let qn = &q[ni * lq * d..(ni + 1) * lq * d];
        let kn = &k[ni * lk * d..(ni + 1) * lk * d];
        let vn = &v[ni * lk * dv..(ni + 1) * lk * dv];
        let gvn = &mut gv[ni * lk * dv..(ni + 1) * lk * dv];
        for qi in 0..lq
        {
            let arow = &attn[(ni * lq + qi) * lk..(ni * lq + qi + 1) * lk];
            let grow = &go[(ni * lq + qi) * dv..(ni * lq + qi + 1) * dv];
            // dA[ki] = go . v_row(ki); softmax jacobian; then into q, k
            let mut da = vec![T::zero(); lk];
            for ki in 0..lk {
                let vrow = &vn[ki * dv..(ki + 1) * dv];
                let mut acc = T::zero();
                for i in 0..dv {
                    acc = acc + grow[i] * vrow[i];
                    gvn[ki * dv + i] = gvn[ki * dv + i] + arow[ki] * grow[i];
                }
                da[ki] = acc;
            }
            let mut dot = T::zero();
            for ki in 0..lk {
                dot = dot + da[ki] * arow[ki];
            }
            let qrow = &qn[qi * d..(qi + 1) * d];
            let gqrow = &mut gq[(ni * lq + qi) * d..(ni * lq + qi + 1) * d];
            for ki in 0..lk {
                let ds = arow[ki] * (da[ki] - dot) * scale;
                let krow = &kn[ki * d..(ki + 1) * d];
                let gkrow = &mut gk[(ni * lk + ki) * d..(ni * lk + ki + 1) * d];
                for i in 0..d {
                    gqrow[i] = gqrow[i] + ds * krow[i];
                    gkrow[i] = gkrow[i] + ds * qrow[i];
                }
            }
        }
    }
    (gq, gk, gv)
}

// ---------------------------------------------------------------------------
// resampling
// ---------------------------------------------------------------------------

pub fn upsample_nearest_forward<T: Real>(
    x: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    factor: usize,
) -> Vec<T> {
    let (h2, w2) = (h * factor, w * factor);
    let mut out = vec![T::zero(); n * c * h2 * w2];
    for pc in 0..n * c {
        let src = &x[pc * h * w..(pc + 1) * h * w];
        let dst = &mut out[pc * h2 * w2..(pc + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / factor) * w + xx / factor];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward<T: Real>(
    go: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    factor: usize,
) -> Vec<T> {
    let (h2, w2) = (h * factor, w * factor);
    let mut gx = vec![T::zero(); n * c * h * w];
    for pc in 0..n * c {
        let src = &go[pc * h2 * w2..(pc + 1) * h2 * w2];
        let dst = &mut gx[pc * h * w..(pc + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                let slot = (y / factor) * w + xx / factor;
                dst[slot] = dst[slot] + src[y * w2 + xx];
            }
        }
    }
    gx
}

pub fn downsample_stride_forward<T: Real>(
    x: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    factor: usize,
) -> Vec<T> {
    let (h2, w2) = (h / factor, w / factor);
    let mut out = vec![T::zero(); n * c * h2 * w2];
    for pc in 0..n * c {
        let src = &x[pc * h * w..(pc + 1) * h * w];
        let dst = &mut out[pc * h2 * w2..(pc + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[y * factor * w + xx * factor];
            }
        }
    }
    out
}

pub fn downsample_stride_backward<T: Real>(
    go: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    factor: usize,
) -> Vec<T> {
    let (h2, w2) = (h / factor, w / factor);
    let mut gx = vec![T::zero(); n * c * h * w];
    for pc in 0..n * c {
        let src = &go[pc * h2 * w2..(pc + 1) * h2 * w2];
        let dst = &mut gx[pc * h * w..(pc + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * factor * w + xx * factor] = src[y * w2 + xx];
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// softmax cross-entropy
// ---------------------------------------------------------------------------

/// logits [n, k]; returns (mean loss, probs [n, k]).
pub fn softmax_cross_entropy_forward<T: Real>(
    logits: &[T],
    labels: &[usize],
    n: usize,
    k: usize,
) -> (T, Vec<T>) {
    let mut probs = vec![T::zero(); n * k];
    let mut loss = T::zero();
    for ni in 0..n {
        let row = &logits[ni * k..(ni + 1) * k];
        let prow = &mut probs[ni * k..(ni + 1) * k];
        let mut maxv = T::neg_infinity();
        for &v in row {
            if v > maxv {
                maxv = v;
            }
        }
        let mut z = T::zero();
        for i in 0..k {
            let e = (row[i] - maxv).exp();
            prow[i] = e;
            z = z + e;
        }
        for p in prow.iter_mut() {
            *p = *p / z;
        }
        loss = loss - prow[labels[ni]].max(T::from_f64(1e-30)).ln();
    }
    (loss / T::from_f64(n as f64), probs)
}

pub fn softmax_cross_entropy_backward<T: Real>(
    gscale: T,
    probs: &[T],
    labels: &[usize],
    n: usize,
    k: usize,
) -> Vec<T> {
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut g = probs.to_vec();
    for ni in 0..n {
        g[ni * k + labels[ni]] = g[ni * k + labels[ni]] - T::one();
    }
    for v in g.iter_mut() {
        *v = *v * gscale * inv_n;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv2d_identity_kernel_preserves_input() {
        let x: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let w = vec![1.0f32];
        let b = vec![0.0f32];
        let out = conv2d_forward(&x, (1, 1, 4, 4), &w, (1, 1, 1), &b, 1, 0);
        assert_eq!(out, x);
    }

    #[test]
    fn conv2d_known_values() {
        // 2x2 input, 2x2 kernel of ones, pad 0 -> single sum
        let x = vec![1.0f32, 2.0, 3.0, 4.0];
        let w = vec![1.0f32; 4];
        let out = conv2d_forward(&x, (1, 1, 2, 2), &w, (1, 2, 2), &[0.5], 1, 0);
        assert_eq!(out, vec![10.5]);
    }

    #[test]
    fn group_norm_constant_input_is_zero_before_affine() {
        let x = vec![3.0f32; 8];
        let gamma = vec![1.0f32; 2];
        let beta = vec![0.0f32; 2];
        let (out, _, _) = group_norm_forward(&x, (1, 2, 2, 2), 1, &gamma, &beta);
        for v in out {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn attention_single_key_returns_value_row() {
        // one key equal to the query: softmax over one element is 1
        let q = vec![0.3f32, -0.7];
        let k = q.clone();
        let v = vec![5.0f32, -2.0, 1.0];
        let (out, attn) = attention_forward(&q, &k, &v, (1, 1, 1, 2, 3));
        assert_eq!(out, v);
        assert_eq!(attn, vec![1.0]);
    }

    #[test]
    fn upsample_then_downsample_is_identity() {
        let x: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let up = upsample_nearest_forward(&x, (1, 1, 3, 4), 2);
        let down = downsample_stride_forward(&up, (1, 1, 6, 8), 2);
        assert_eq!(down, x);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = vec![0.0f32; 6];
        let (loss, probs) = softmax_cross_entropy_forward(&logits, &[1, 2], 2, 3);
        assert!((loss - (3.0f32).ln()).abs() < 1e-6);
        for p in probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-6);
        }
    }
}
