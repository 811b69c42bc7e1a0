//! Compute kernels behind the graph ops. Forward kernels parallelize over
//! disjoint output slices; backward kernels that scatter stay sequential so
//! results never depend on thread schedule.

use crate::exec;
use crate::real::Real;

// ---------------------------------------------------------------- broadcast

/// Right-aligned broadcast shape of two operands, numpy-style.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[i] = da.max(db);
    }
    Some(out)
}

/// Row-major strides of `shape` viewed inside `out_shape`; broadcast axes
/// (and left-padded axes) get stride 0.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let n = out_shape.len();
    let pad = n - shape.len();
    let mut strides = vec![0usize; n];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[pad + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn flat_to_offset(mut flat: usize, out_shape: &[usize], strides: &[usize]) -> usize {
    let mut off = 0usize;
    for i in (0..out_shape.len()).rev() {
        let c = flat % out_shape[i];
        flat /= out_shape[i];
        off += c * strides[i];
    }
    off
}

pub fn binary_broadcast<S: Real>(
    a: &[S],
    a_shape: &[usize],
    b: &[S],
    b_shape: &[usize],
    out_shape: &[usize],
    op: impl Fn(S, S) -> S + Sync,
) -> Vec<S> {
    let numel: usize = out_shape.iter().product();
    let mut out = vec![S::zero(); numel];
    if a_shape == out_shape && b_shape == out_shape {
        exec::for_each_chunk_mut(&mut out, 4096.min(numel.max(1)), |i, chunk| {
            let base = i * 4096.min(numel.max(1));
            for (j, o) in chunk.iter_mut().enumerate() {
                *o = op(a[base + j], b[base + j]);
            }
        });
        return out;
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    for (flat, o) in out.iter_mut().enumerate() {
        let ia = flat_to_offset(flat, out_shape, &sa);
        let ib = flat_to_offset(flat, out_shape, &sb);
        *o = op(a[ia], b[ib]);
    }
    out
}

/// Accumulates `grad` (shaped `out_shape`) into `acc` (shaped `shape`),
/// summing over broadcast axes.
pub fn reduce_broadcast_grad<S: Real>(
    grad: &[S],
    out_shape: &[usize],
    acc: &mut [S],
    shape: &[usize],
) {
    if shape == out_shape {
        for (a, g) in acc.iter_mut().zip(grad) {
            *a = *a + *g;
        }
        return;
    }
    let strides = broadcast_strides(shape, out_shape);
    for (flat, g) in grad.iter().enumerate() {
        let off = flat_to_offset(flat, out_shape, &strides);
        acc[off] = acc[off] + *g;
    }
}

// ------------------------------------------------------------------ matmul

/// `a` is MxK, `b` is KxN, output MxN.
pub fn matmul<S: Real>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    exec::for_each_chunk_mut(&mut out, n, |i, row| {
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    });
    out
}

/// dA[i,p] = sum_j G[i,j] B[p,j]
pub fn matmul_grad_a<S: Real>(g: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut da = vec![S::zero(); m * k];
    exec::for_each_chunk_mut(&mut da, k, |i, row| {
        let grow = &g[i * n..(i + 1) * n];
        for (p, o) in row.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = S::zero();
            for (gv, bv) in grow.iter().zip(brow) {
                acc = acc + *gv * *bv;
            }
            *o = acc;
        }
    });
    da
}

/// dB[p,j] = sum_i A[i,p] G[i,j]
pub fn matmul_grad_b<S: Real>(g: &[S], a: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut db = vec![S::zero(); k * n];
    exec::for_each_chunk_mut(&mut db, n, |p, row| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let grow = &g[i * n..(i + 1) * n];
            for (o, &gv) in row.iter_mut().zip(grow) {
                *o = *o + av * gv;
            }
        }
    });
    db
}

// ------------------------------------------------------------- convolution

/// 2D cross-correlation. Input `[H,W,Ci]`, kernel `[Kh,Kw,Ci,Co]`, zero
/// padding `pad`, equal stride per axis. Output `[Ho,Wo,Co]`.
pub fn conv2d<S: Real>(
    input: &[S],
    (h, w, ci): (usize, usize, usize),
    kernel: &[S],
    (kh, kw, co): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<S> {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![S::zero(); ho * wo * co];
    exec::for_each_chunk_mut(&mut out, wo * co, |oy, orow| {
        for ox in 0..wo {
            let opix = &mut orow[ox * co..(ox + 1) * co];
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let ipix = &input[((iy as usize * w) + ix as usize) * ci..][..ci];
                    let ktap = &kernel[((ky * kw + kx) * ci) * co..][..ci * co];
                    for (c, &iv) in ipix.iter().enumerate() {
                        if iv == S::zero() {
                            continue;
                        }
                        let krow = &ktap[c * co..(c + 1) * co];
                        for (o, &kv) in opix.iter_mut().zip(krow) {
                            *o = *o + iv * kv;
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gather-form input gradient of [`conv2d`].
pub fn conv2d_grad_input<S: Real>(
    gout: &[S],
    (h, w, ci): (usize, usize, usize),
    kernel: &[S],
    (kh, kw, co): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<S> {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut din = vec![S::zero(); h * w * ci];
    exec::for_each_chunk_mut(&mut din, w * ci, |iy, irow| {
        for ix in 0..w {
            let dpix = &mut irow[ix * ci..(ix + 1) * ci];
            for ky in 0..kh {
                let oy_num = iy as isize + pad as isize - ky as isize;
                if oy_num < 0 || oy_num % stride as isize != 0 {
                    continue;
                }
                let oy = (oy_num / stride as isize) as usize;
                if oy >= ho {
                    continue;
                }
                for kx in 0..kw {
                    let ox_num = ix as isize + pad as isize - kx as isize;
                    if ox_num < 0 || ox_num % stride as isize != 0 {
                        continue;
                    }
                    let ox = (ox_num / stride as isize) as usize;
                    if ox >= wo {
                        continue;
                    }
                    let gpix = &gout[(oy * wo + ox) * co..][..co];
                    let ktap = &kernel[((ky * kw + kx) * ci) * co..][..ci * co];
                    for (c, d) in dpix.iter_mut().enumerate() {
                        let krow = &ktap[c * co..(c + 1) * co];
                        let mut acc = S::zero();
                        for (&gv, &kv) in gpix.iter().zip(krow) {
                            acc = acc + gv * kv;
                        }
                        *d = *d + acc;
                    }
                }
            }
        }
    });
    din
}

/// Gather-form kernel gradient of [`conv2d`]; parallel over kernel taps.
pub fn conv2d_grad_kernel<S: Real>(
    gout: &[S],
    input: &[S],
    (h, w, ci): (usize, usize, usize),
    (kh, kw, co): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<S> {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut dk = vec![S::zero(); kh * kw * ci * co];
    exec::for_each_chunk_mut(&mut dk, co, |tap, drow| {
        let c = tap % ci;
        let kx = (tap / ci) % kw;
        let ky = tap / (ci * kw);
        for oy in 0..ho {
            let iy = (oy * stride + ky) as isize - pad as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for ox in 0..wo {
                let ix = (ox * stride + kx) as isize - pad as isize;
                if ix < 0 || ix >= w as isize {
                    continue;
                }
                let iv = input[((iy as usize * w) + ix as usize) * ci + c];
                if iv == S::zero() {
                    continue;
                }
                let gpix = &gout[(oy * wo + ox) * co..][..co];
                for (d, &gv) in drow.iter_mut().zip(gpix) {
                    *d = *d + iv * gv;
                }
            }
        }
    });
    dk
}

/// 3D cross-correlation with an asymmetric leading-axis pad so decoders can
/// run it causally. Input `[T,H,W,Ci]`, kernel `[Kt,Kh,Kw,Ci,Co]`, stride 1.
pub fn conv3d<S: Real>(
    input: &[S],
    (t, h, w, ci): (usize, usize, usize, usize),
    kernel: &[S],
    (kt, kh, kw, co): (usize, usize, usize, usize),
    (pad_t_front, pad_t_back): (usize, usize),
    pad_s: usize,
) -> Vec<S> {
    let to = t + pad_t_front + pad_t_back + 1 - kt;
    let ho = h + 2 * pad_s - kh + 1;
    let wo = w + 2 * pad_s - kw + 1;
    let mut out = vec![S::zero(); to * ho * wo * co];
    exec::for_each_chunk_mut(&mut out, ho * wo * co, |ot, oframe| {
        for kt_i in 0..kt {
            let it = (ot + kt_i) as isize - pad_t_front as isize;
            if it < 0 || it >= t as isize {
                continue;
            }
            let iframe = &input[it as usize * h * w * ci..][..h * w * ci];
            let kslab = &kernel[kt_i * kh * kw * ci * co..][..kh * kw * ci * co];
            for oy in 0..ho {
                for ox in 0..wo {
                    let opix = &mut oframe[(oy * wo + ox) * co..][..co];
                    for ky in 0..kh {
                        let iy = (oy + ky) as isize - pad_s as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox + kx) as isize - pad_s as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let ipix = &iframe[((iy as usize * w) + ix as usize) * ci..][..ci];
                            let ktap = &kslab[((ky * kw + kx) * ci) * co..][..ci * co];
                            for (c, &iv) in ipix.iter().enumerate() {
                                if iv == S::zero() {
                                    continue;
                                }
                                let krow = &ktap[c * co..(c + 1) * co];
                                for (o, &kv) in opix.iter_mut().zip(krow) {
                                    *o = *o + iv * kv;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn conv3d_grad_input<S: Real>(
    gout: &[S],
    (t, h, w, ci): (usize, usize, usize, usize),
    kernel: &[S],
    (kt, kh, kw, co): (usize, usize, usize, usize),
    (pad_t_front, pad_t_back): (usize, usize),
    pad_s: usize,
) -> Vec<S> {
    let to = t + pad_t_front + pad_t_back + 1 - kt;
    let ho = h + 2 * pad_s - kh + 1;
    let wo = w + 2 * pad_s - kw + 1;
    let mut din = vec![S::zero(); t * h * w * ci];
    exec::for_each_chunk_mut(&mut din, h * w * ci, |it, iframe| {
        for kt_i in 0..kt {
            let ot = it as isize + pad_t_front as isize - kt_i as isize;
            if ot < 0 || ot >= to as isize {
                continue;
            }
            let gframe = &gout[ot as usize * ho * wo * co..][..ho * wo * co];
            let kslab = &kernel[kt_i * kh * kw * ci * co..][..kh * kw * ci * co];
            for iy in 0..h {
                for ix in 0..w {
                    let dpix = &mut iframe[(iy * w + ix) * ci..][..ci];
                    for ky in 0..kh {
                        let oy = iy as isize + pad_s as isize - ky as isize;
                        if oy < 0 || oy >= ho as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ox = ix as isize + pad_s as isize - kx as isize;
                            if ox < 0 || ox >= wo as isize {
                                continue;
                            }
                            let gpix = &gframe[((oy as usize * wo) + ox as usize) * co..][..co];
                            let ktap = &kslab[((ky * kw + kx) * ci) * co..][..ci * co];
                            for (c, d) in dpix.iter_mut().enumerate() {
                                let krow = &ktap[c * co..(c + 1) * co];
                                let mut acc = S::zero();
                                for (&gv, &kv) in gpix.iter().zip(krow) {
                                    acc = acc + gv * kv;
                                }
                                *d = *d + acc;
                            }
                        }
                    }
                }
            }
        }
    });
    din
}

pub fn conv3d_grad_kernel<S: Real>(
    gout: &[S],
    input: &[S],
    (t, h, w, ci): (usize, usize, usize, usize),
    (kt, kh, kw, co): (usize, usize, usize, usize),
    (pad_t_front, pad_t_back): (usize, usize),
    pad_s: usize,
) -> Vec<S> {
    let to = t + pad_t_front + pad_t_back + 1 - kt;
    let ho = h + 2 * pad_s - kh + 1;
    let wo = w + 2 * pad_s - kw + 1;
    let mut dk = vec![S::zero(); kt * kh * kw * ci * co];
    exec::for_each_chunk_mut(&mut dk, co, |tap, drow| {
        let c = tap % ci;
        let kx = (tap / ci) % kw;
        let ky = (tap / (ci * kw)) % kh;
        let kt_i = tap / (ci * kw * kh);
        for ot in 0..to {
            let it = (ot + kt_i) as isize - pad_t_front as isize;
            if it < 0 || it >= t as isize {
                continue;
            }
            for oy in 0..ho {
                let iy = oy as isize + ky as isize - pad_s as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for ox in 0..wo {
                    let ix = ox as isize + kx as isize - pad_s as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let iv = input
                        [(((it as usize * h) + iy as usize) * w + ix as usize) * ci + c];
                    if iv == S::zero() {
                        continue;
                    }
                    let gpix = &gout[((ot * ho + oy) * wo + ox) * co..][..co];
                    for (d, &gv) in drow.iter_mut().zip(gpix) {
                        *d = *d + iv * gv;
                    }
                }
            }
        }
    });
    dk
}

// -------------------------------------------------------- softmax / norms

/// Numerically stabilized softmax over the last dimension (`rows` rows of
/// width `k`). Masked variants live in the attention kernel.
pub fn softmax_lastdim<S: Real>(x: &[S], rows: usize, k: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * k];
    exec::for_each_chunk_mut(&mut out, k, |r, orow| {
        let xrow = &x[r * k..(r + 1) * k];
        let mut mx = xrow[0];
        for &v in xrow.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = S::zero();
        for (o, &v) in orow.iter_mut().zip(xrow) {
            let e = (v - mx).exp();
            *o = e;
            sum = sum + e;
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    });
    out
}

/// dx = y * (g - sum(g*y)) per row, where y is the softmax output.
pub fn softmax_backward<S: Real>(g: &[S], y: &[S], rows: usize, k: usize) -> Vec<S> {
    let mut dx = vec![S::zero(); rows * k];
    exec::for_each_chunk_mut(&mut dx, k, |r, drow| {
        let yrow = &y[r * k..(r + 1) * k];
        let grow = &g[r * k..(r + 1) * k];
        let mut dot = S::zero();
        for (&gv, &yv) in grow.iter().zip(yrow) {
            dot = dot + gv * yv;
        }
        for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
            *d = yv * (gv - dot);
        }
    });
    dx
}

pub fn log_softmax_lastdim<S: Real>(x: &[S], rows: usize, k: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * k];
    exec::for_each_chunk_mut(&mut out, k, |r, orow| {
        let xrow = &x[r * k..(r + 1) * k];
        let mut mx = xrow[0];
        for &v in xrow.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = S::zero();
        for &v in xrow.iter() {
            sum = sum + (v - mx).exp();
        }
        let lse = mx + sum.ln();
        for (o, &v) in orow.iter_mut().zip(xrow) {
            *o = v - lse;
        }
    });
    out
}

/// dx = g - softmax(x) * sum(g) per row; `logy` is the log-softmax output.
pub fn log_softmax_backward<S: Real>(g: &[S], logy: &[S], rows: usize, k: usize) -> Vec<S> {
    let mut dx = vec![S::zero(); rows * k];
    exec::for_each_chunk_mut(&mut dx, k, |r, drow| {
        let lrow = &logy[r * k..(r + 1) * k];
        let grow = &g[r * k..(r + 1) * k];
        let mut gsum = S::zero();
        for &gv in grow.iter() {
            gsum = gsum + gv;
        }
        for ((d, &gv), &lv) in drow.iter_mut().zip(grow).zip(lrow) {
            *d = gv - lv.exp() * gsum;
        }
    });
    dx
}

/// Group normalization (pre-affine). The layout is `[lead..., C]`; each of
/// the `groups` channel groups is normalized over all leading positions.
/// Returns (normalized, per-group mean, per-group inverse stddev).
pub fn group_norm<S: Real>(
    x: &[S],
    lead: usize,
    channels: usize,
    groups: usize,
    eps: f64,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let gc = channels / groups;
    let count = S::of((lead * gc) as f64);
    let mut mean = vec![S::zero(); groups];
    let mut rstd = vec![S::zero(); groups];
    for g in 0..groups {
        let mut sum = S::zero();
        for l in 0..lead {
            let base = l * channels + g * gc;
            for c in 0..gc {
                sum = sum + x[base + c];
            }
        }
        let mu = sum / count;
        let mut var = S::zero();
        for l in 0..lead {
            let base = l * channels + g * gc;
            for c in 0..gc {
                let d = x[base + c] - mu;
                var = var + d * d;
            }
        }
        var = var / count;
        mean[g] = mu;
        rstd[g] = S::one() / (var + S::of(eps)).sqrt();
    }
    let mut out = vec![S::zero(); x.len()];
    for l in 0..lead {
        for g in 0..groups {
            let base = l * channels + g * gc;
            for c in 0..gc {
                out[base + c] = (x[base + c] - mean[g]) * rstd[g];
            }
        }
    }
    (out, mean, rstd)
}

pub fn group_norm_backward<S: Real>(
    gout: &[S],
    y: &[S],
    rstd: &[S],
    lead: usize,
    channels: usize,
    groups: usize,
) -> Vec<S> {
    let gc = channels / groups;
    let count = S::of((lead * gc) as f64);
    let mut dx = vec![S::zero(); gout.len()];
    for g in 0..groups {
        let mut gsum = S::zero();
        let mut gysum = S::zero();
        for l in 0..lead {
            let base = l * channels + g * gc;
            for c in 0..gc {
                gsum = gsum + gout[base + c];
                gysum = gysum + gout[base + c] * y[base + c];
            }
        }
        let gmean = gsum / count;
        let gymean = gysum / count;
        for l in 0..lead {
            let base = l * channels + g * gc;
            for c in 0..gc {
                dx[base + c] = rstd[g] * (gout[base + c] - gmean - y[base + c] * gymean);
            }
        }
    }
    dx
}

// -------------------------------------------------------------- attention

/// Fused multi-head scaled-dot-product attention along the second axis.
/// q: `[B,Tq,C]`, k/v: `[B,Tk,C]`; `mask` (when present) is `Tq x Tk`,
/// `true` = attendable. Masked positions get weight exactly 0 and are
/// skipped entirely in the weighted sums. Returns (output, weights) with
/// weights laid out `[B, heads, Tq, Tk]`.
pub fn mha<S: Real>(
    q: &[S],
    k: &[S],
    v: &[S],
    batch: usize,
    tq: usize,
    tk: usize,
    c: usize,
    heads: usize,
    mask: Option<&[bool]>,
) -> (Vec<S>, Vec<S>) {
    let d = c / heads;
    let scale = S::of(1.0 / (d as f64).sqrt());
    let mut out = vec![S::zero(); batch * tq * c];
    let mut weights = vec![S::zero(); batch * heads * tq * tk];
    // Two passes so both buffers fill disjoint per-batch slices.
    exec::for_each_chunk_mut(&mut weights, heads * tq * tk, |b, wslab| {
        let qb = &q[b * tq * c..(b + 1) * tq * c];
        let kb = &k[b * tk * c..(b + 1) * tk * c];
        for h in 0..heads {
            let off = h * d;
            for iq in 0..tq {
                let wrow = &mut wslab[(h * tq + iq) * tk..(h * tq + iq + 1) * tk];
                let qrow = &qb[iq * c + off..iq * c + off + d];
                let mut mx = S::neg_infinity();
                for ik in 0..tk {
                    if let Some(m) = mask {
                        if !m[iq * tk + ik] {
                            continue;
                        }
                    }
                    let krow = &kb[ik * c + off..ik * c + off + d];
                    let mut s = S::zero();
                    for (&qv, &kv) in qrow.iter().zip(krow) {
                        s = s + qv * kv;
                    }
                    s = s * scale;
                    wrow[ik] = s;
                    if s > mx {
                        mx = s;
                    }
                }
                let mut sum = S::zero();
                for ik in 0..tk {
                    let attendable = mask.map_or(true, |m| m[iq * tk + ik]);
                    if attendable {
                        let e = (wrow[ik] - mx).exp();
                        wrow[ik] = e;
                        sum = sum + e;
                    } else {
                        wrow[ik] = S::zero();
                    }
                }
                for ik in 0..tk {
                    let attendable = mask.map_or(true, |m| m[iq * tk + ik]);
                    if attendable {
                        wrow[ik] = wrow[ik] / sum;
                    }
                }
            }
        }
    });
    exec::for_each_chunk_mut(&mut out, tq * c, |b, oslab| {
        let vb = &v[b * tk * c..(b + 1) * tk * c];
        let wslab = &weights[b * heads * tq * tk..(b + 1) * heads * tq * tk];
        for h in 0..heads {
            let off = h * d;
            for iq in 0..tq {
                let wrow = &wslab[(h * tq + iq) * tk..(h * tq + iq + 1) * tk];
                let orow = &mut oslab[iq * c + off..iq * c + off + d];
                for ik in 0..tk {
                    let wv = wrow[ik];
                    if wv == S::zero() {
                        continue;
                    }
                    let vrow = &vb[ik * c + off..ik * c + off + d];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o = *o + wv * vv;
                    }
                }
            }
        }
    });
    (out, weights)
}

/// Backward of [`mha`]. Masked positions contribute nothing.
#[allow(clippy::too_many_arguments)]
pub fn mha_backward<S: Real>(
    gout: &[S],
    q: &[S],
    k: &[S],
    v: &[S],
    weights: &[S],
    batch: usize,
    tq: usize,
    tk: usize,
    c: usize,
    heads: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let d = c / heads;
    let scale = S::of(1.0 / (d as f64).sqrt());
    let mut dq = vec![S::zero(); batch * tq * c];
    let mut dk = vec![S::zero(); batch * tk * c];
    let mut dv = vec![S::zero(); batch * tk * c];
    let mut ds_row = vec![S::zero(); tk];
    for b in 0..batch {
        let qb = &q[b * tq * c..(b + 1) * tq * c];
        let kb = &k[b * tk * c..(b + 1) * tk * c];
        let vb = &v[b * tk * c..(b + 1) * tk * c];
        let gb = &gout[b * tq * c..(b + 1) * tq * c];
        let wslab = &weights[b * heads * tq * tk..(b + 1) * heads * tq * tk];
        for h in 0..heads {
            let off = h * d;
            for iq in 0..tq {
                let wrow = &wslab[(h * tq + iq) * tk..(h * tq + iq + 1) * tk];
                let grow = &gb[iq * c + off..iq * c + off + d];
                // dw[ik] = <g_out, v[ik]>; dv[ik] += w * g_out
                let mut dot = S::zero();
                for ik in 0..tk {
                    let wv = wrow[ik];
                    if wv == S::zero() {
                        ds_row[ik] = S::zero();
                        continue;
                    }
                    let vrow = &vb[ik * c + off..ik * c + off + d];
                    let mut dw = S::zero();
                    for (&gv, &vv) in grow.iter().zip(vrow) {
                        dw = dw + gv * vv;
                    }
                    ds_row[ik] = dw;
                    dot = dot + dw * wv;
                    let dvrow = &mut dv[b * tk * c + ik * c + off..][..d];
                    for (o, &gv) in dvrow.iter_mut().zip(grow) {
                        *o = *o + wv * gv;
                    }
                }
                // softmax backward confined to attendable (w > 0) entries
                for ik in 0..tk {
                    let wv = wrow[ik];
                    if wv == S::zero() {
                        continue;
                    }
                    let ds = wv * (ds_row[ik] - dot) * scale;
                    let krow = &kb[ik * c + off..ik * c + off + d];
                    let qrow = &qb[iq * c + off..iq * c + off + d];
                    let dqrow = &mut dq[b * tq * c + iq * c + off..][..d];
                    for (o, &kv) in dqrow.iter_mut().zip(krow) {
                        *o = *o + ds * kv;
                    }
                    let dkrow = &mut dk[b * tk * c + ik * c + off..][..d];
                    for (o, &qv) in dkrow.iter_mut().zip(qrow) {
                        *o = *o + ds * qv;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

// -------------------------------------------------------------- sampling

/// Cell index + interpolation weight along one axis. At exact integer
/// coordinates the interval below the point is used (one-sided rule), so
/// boundary gradients are deterministic.
#[inline]
pub fn lower_cell(x: f64, n: usize) -> (usize, f64) {
    if n <= 1 {
        return (0, 0.0);
    }
    let fl = x.floor();
    if x == fl && x >= 1.0 {
        ((x as usize) - 1, 1.0)
    } else {
        (fl as usize, x - fl)
    }
}

/// Bilinear gather. `feat` is `[H,W,C]`, `coords` is `[M,2]` in grid units
/// (row, col); points outside `[0,H-1]x[0,W-1]` return `fill`.
pub fn sample_bilinear<S: Real>(
    feat: &[S],
    (h, w, c): (usize, usize, usize),
    coords: &[S],
    fill: &[S],
) -> Vec<S> {
    let m = coords.len() / 2;
    let mut out = vec![S::zero(); m * c];
    exec::for_each_chunk_mut(&mut out, c, |i, opix| {
        let x = coords[2 * i].f64();
        let y = coords[2 * i + 1].f64();
        if !(0.0..=(h - 1) as f64).contains(&x) || !(0.0..=(w - 1) as f64).contains(&y) {
            opix.copy_from_slice(fill);
            return;
        }
        let (i0, t) = lower_cell(x, h);
        let (j0, u) = lower_cell(y, w);
        let i1 = (i0 + 1).min(h - 1);
        let j1 = (j0 + 1).min(w - 1);
        let (t, u) = (S::of(t), S::of(u));
        let one = S::one();
        let f00 = &feat[(i0 * w + j0) * c..][..c];
        let f01 = &feat[(i0 * w + j1) * c..][..c];
        let f10 = &feat[(i1 * w + j0) * c..][..c];
        let f11 = &feat[(i1 * w + j1) * c..][..c];
        for cc in 0..c {
            opix[cc] = (one - t) * ((one - u) * f00[cc] + u * f01[cc])
                + t * ((one - u) * f10[cc] + u * f11[cc]);
        }
    });
    out
}

/// Backward of [`sample_bilinear`]: scatters into dfeat/dfill, and produces
/// per-point coordinate gradients.
pub fn sample_bilinear_backward<S: Real>(
    gout: &[S],
    feat: &[S],
    (h, w, c): (usize, usize, usize),
    coords: &[S],
    dfeat: Option<&mut [S]>,
    dcoords: Option<&mut [S]>,
    dfill: Option<&mut [S]>,
) {
    let m = coords.len() / 2;
    let mut dfeat = dfeat;
    let mut dcoords = dcoords;
    let mut dfill = dfill;
    for i in 0..m {
        let g = &gout[i * c..(i + 1) * c];
        let x = coords[2 * i].f64();
        let y = coords[2 * i + 1].f64();
        if !(0.0..=(h - 1) as f64).contains(&x) || !(0.0..=(w - 1) as f64).contains(&y) {
            if let Some(df) = dfill.as_deref_mut() {
                for (o, &gv) in df.iter_mut().zip(g) {
                    *o = *o + gv;
                }
            }
            continue;
        }
        let (i0, t) = lower_cell(x, h);
        let (j0, u) = lower_cell(y, w);
        let i1 = (i0 + 1).min(h - 1);
        let j1 = (j0 + 1).min(w - 1);
        let (ts, us) = (S::of(t), S::of(u));
        let one = S::one();
        if let Some(df) = dfeat.as_deref_mut() {
            for (cc, &gv) in g.iter().enumerate() {
                df[(i0 * w + j0) * c + cc] =
                    df[(i0 * w + j0) * c + cc] + (one - ts) * (one - us) * gv;
                df[(i0 * w + j1) * c + cc] = df[(i0 * w + j1) * c + cc] + (one - ts) * us * gv;
                df[(i1 * w + j0) * c + cc] = df[(i1 * w + j0) * c + cc] + ts * (one - us) * gv;
                df[(i1 * w + j1) * c + cc] = df[(i1 * w + j1) * c + cc] + ts * us * gv;
            }
        }
        if let Some(dc) = dcoords.as_deref_mut() {
            let mut gx = S::zero();
            let mut gy = S::zero();
            for (cc, &gv) in g.iter().enumerate() {
                let f00 = feat[(i0 * w + j0) * c + cc];
                let f01 = feat[(i0 * w + j1) * c + cc];
                let f10 = feat[(i1 * w + j0) * c + cc];
                let f11 = feat[(i1 * w + j1) * c + cc];
                gx = gx + gv * ((one - us) * (f10 - f00) + us * (f11 - f01));
                gy = gy + gv * ((one - ts) * (f01 - f00) + ts * (f11 - f10));
            }
            dc[2 * i] = dc[2 * i] + gx;
            dc[2 * i + 1] = dc[2 * i + 1] + gy;
        }
    }
}

/// Trilinear gather from `vol` `[X,Y,Z,C]` at constant `coords` `[M,3]` in
/// grid units. Out-of-volume points return zeros.
pub fn sample_trilinear<S: Real>(
    vol: &[S],
    (nx, ny, nz, c): (usize, usize, usize, usize),
    coords: &[f64],
) -> Vec<S> {
    let m = coords.len() / 3;
    let mut out = vec![S::zero(); m * c];
    exec::for_each_chunk_mut(&mut out, c, |i, opix| {
        let x = coords[3 * i];
        let y = coords[3 * i + 1];
        let z = coords[3 * i + 2];
        if !(0.0..=(nx - 1) as f64).contains(&x)
            || !(0.0..=(ny - 1) as f64).contains(&y)
            || !(0.0..=(nz - 1) as f64).contains(&z)
        {
            return; // zeros
        }
        let (i0, t) = lower_cell(x, nx);
        let (j0, u) = lower_cell(y, ny);
        let (k0, s) = lower_cell(z, nz);
        let i1 = (i0 + 1).min(nx - 1);
        let j1 = (j0 + 1).min(ny - 1);
        let k1 = (k0 + 1).min(nz - 1);
        for (di, wi) in [(i0, 1.0 - t), (i1, t)] {
            if wi == 0.0 {
                continue;
            }
            for (dj, wj) in [(j0, 1.0 - u), (j1, u)] {
                if wj == 0.0 {
                    continue;
                }
                for (dk, wk) in [(k0, 1.0 - s), (k1, s)] {
                    if wk == 0.0 {
                        continue;
                    }
                    let wgt = S::of(wi * wj * wk);
                    let src = &vol[((di * ny + dj) * nz + dk) * c..][..c];
                    for (o, &v) in opix.iter_mut().zip(src) {
                        *o = *o + wgt * v;
                    }
                }
            }
        }
    });
    out
}

pub fn sample_trilinear_backward<S: Real>(
    gout: &[S],
    (nx, ny, nz, c): (usize, usize, usize, usize),
    coords: &[f64],
    dvol: &mut [S],
) {
    let m = coords.len() / 3;
    for i in 0..m {
        let x = coords[3 * i];
        let y = coords[3 * i + 1];
        let z = coords[3 * i + 2];
        if !(0.0..=(nx - 1) as f64).contains(&x)
            || !(0.0..=(ny - 1) as f64).contains(&y)
            || !(0.0..=(nz - 1) as f64).contains(&z)
        {
            continue;
        }
        let g = &gout[i * c..(i + 1) * c];
        let (i0, t) = lower_cell(x, nx);
        let (j0, u) = lower_cell(y, ny);
        let (k0, s) = lower_cell(z, nz);
        let i1 = (i0 + 1).min(nx - 1);
        let j1 = (j0 + 1).min(ny - 1);
        let k1 = (k0 + 1).min(nz - 1);
        for (di, wi) in [(i0, 1.0 - t), (i1, t)] {
            for (dj, wj) in [(j0, 1.0 - u), (j1, u)] {
                for (dk, wk) in [(k0, 1.0 - s), (k1, s)] {
                    let wgt = S::of(wi * wj * wk);
                    if wgt == S::zero() {
                        continue;
                    }
                    let dst = &mut dvol[((di * ny + dj) * nz + dk) * c..][..c];
                    for (o, &gv) in dst.iter_mut().zip(g) {
                        *o = *o + wgt * gv;
                    }
                }
            }
        }
    }
}

// ----------------------------------------------------------- box filtering

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    let last = (n - 1) as isize;
    if i > last {
        i = 2 * last - i;
    }
    i as usize
}

/// 3x3 mean filter with reflection padding, per channel. `x` is `[H,W,C]`.
pub fn box_mean3x3_reflect<S: Real>(x: &[S], (h, w, c): (usize, usize, usize)) -> Vec<S> {
    let ninth = S::of(1.0 / 9.0);
    let mut out = vec![S::zero(); h * w * c];
    exec::for_each_chunk_mut(&mut out, w * c, |y, orow| {
        for xw in 0..w {
            let opix = &mut orow[xw * c..(xw + 1) * c];
            for dy in -1isize..=1 {
                let sy = reflect(y as isize + dy, h);
                for dx in -1isize..=1 {
                    let sx = reflect(xw as isize + dx, w);
                    let spix = &x[(sy * w + sx) * c..][..c];
                    for (o, &v) in opix.iter_mut().zip(spix) {
                        *o = *o + v;
                    }
                }
            }
            for o in opix.iter_mut() {
                *o = *o * ninth;
            }
        }
    });
    out
}

pub fn box_mean3x3_reflect_backward<S: Real>(
    gout: &[S],
    (h, w, c): (usize, usize, usize),
) -> Vec<S> {
    let ninth = S::of(1.0 / 9.0);
    let mut din = vec![S::zero(); h * w * c];
    for y in 0..h {
        for xw in 0..w {
            let g = &gout[(y * w + xw) * c..][..c];
            for dy in -1isize..=1 {
                let sy = reflect(y as isize + dy, h);
                for dx in -1isize..=1 {
                    let sx = reflect(xw as isize + dx, w);
                    let dst = &mut din[(sy * w + sx) * c..][..c];
                    for (o, &gv) in dst.iter_mut().zip(g) {
                        *o = *o + gv * ninth;
                    }
                }
            }
        }
    }
    din
}
