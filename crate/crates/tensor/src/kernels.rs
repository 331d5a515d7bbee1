//! Raw compute kernels behind the tape ops.
//!
//! Every kernel has a sequential form; the data-parallel form (feature
//! `parallel`) splits work over *disjoint output slices* and runs the same
//! sequential inner loop per slice, so results are bitwise identical to the
//! sequential path regardless of worker count. The `*_seq` entry points stay
//! public for the benchmark suite.

use crate::scalar::Scalar;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many independent units, parallel dispatch is not worth the
/// fork-join overhead.
#[cfg(feature = "parallel")]
const PAR_MIN_UNITS: usize = 4;

// ---------------------------------------------------------------------------
// conv2d: 3x3 kernel, stride 1, zero padding 1 (same spatial dims)
// x: [N,C,H,W]  w: [F,C,3,3]  b: [F]  out: [N,F,H,W]
// ---------------------------------------------------------------------------

/// Row ranges for a kernel row offset: output rows y with y+ky-1 in [0,h).
#[inline(always)]
fn row_span(ky: usize, h: usize) -> (usize, usize) {
    (usize::from(ky == 0), if ky == 2 { h - 1 } else { h })
}

/// Column offsets for a kernel column offset kx: (out start, in start, len).
#[inline(always)]
fn col_span(kx: usize, wd: usize) -> (usize, usize, usize) {
    match kx {
        0 => (1, 0, wd - 1),
        1 => (0, 0, wd),
        _ => (0, 1, wd - 1),
    }
}

/// Shifted-row accumulation for one output plane (n, f).
fn conv2d_plane<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: T,
    n: usize,
    f: usize,
    c: usize,
    h: usize,
    wd: usize,
    out: &mut [T],
) {
    out.fill(bias);
    for ci in 0..c {
        let xp = &x[(n * c + ci) * h * wd..][..h * wd];
        let wf = &w[(f * c + ci) * 9..][..9];
        for ky in 0..3usize {
            let (y0, y1) = row_span(ky, h);
            for kx in 0..3usize {
                let wv = wf[ky * 3 + kx];
                let (ox0, ix0, len) = col_span(kx, wd);
                for y in y0..y1 {
                    let iy = y + ky - 1;
                    let src = &xp[iy * wd + ix0..][..len];
                    let dst = &mut out[y * wd + ox0..][..len];
                    for (o, r) in dst.iter_mut().zip(src) {
                        *o += wv * *r;
                    }
                }
            }
        }
    }
}

pub fn conv2d_fwd_seq<T: Scalar>(
    x: &[T],
    w: &[T],
    b: &[T],
    dims: (usize, usize, usize, usize, usize),
    out: &mut [T],
) {
    let (_n, c, h, wd, f) = dims;
    for (p, plane) in out.chunks_mut(h * wd).enumerate() {
        conv2d_plane(x, w, b[p % f], p / f, p % f, c, h, wd, plane);
    }
}

/// dims = (n, c, h, w, f)
pub fn conv2d_fwd<T: Scalar>(
    x: &[T],
    w: &[T],
    b: &[T],
    dims: (usize, usize, usize, usize, usize),
    out: &mut [T],
) {
    #[cfg(feature = "parallel")]
    {
        let (n, c, h, wd, f) = dims;
        if n * f >= PAR_MIN_UNITS {
            out.par_chunks_mut(h * wd).enumerate().for_each(|(p, plane)| {
                conv2d_plane(x, w, b[p % f], p / f, p % f, c, h, wd, plane);
            });
            return;
        }
    }
    conv2d_fwd_seq(x, w, b, dims, out);
}

/// Gradient w.r.t. the input: correlation of dy with the kernel offsets
/// reversed. Fills the (n, ci) plane of dx.
fn conv2d_dx_plane<T: Scalar>(
    dy: &[T],
    w: &[T],
    n: usize,
    ci: usize,
    c: usize,
    f: usize,
    h: usize,
    wd: usize,
    dx: &mut [T],
) {
    dx.fill(T::ZERO);
    for fi in 0..f {
        let dyp = &dy[(n * f + fi) * h * wd..][..h * wd];
        let wf = &w[(fi * c + ci) * 9..][..9];
        for ky in 0..3usize {
            // input rows iy whose source output row y = iy + 1 - ky is valid
            let (iy0, iy1) = match ky {
                0 => (0, h - 1),
                1 => (0, h),
                _ => (1, h),
            };
            for kx in 0..3usize {
                let wv = wf[ky * 3 + kx];
                let (dx0, dy0, len) = match kx {
                    0 => (0, 1, wd - 1),
                    1 => (0, 0, wd),
                    _ => (1, 0, wd - 1),
                };
                for iy in iy0..iy1 {
                    let y = iy + 1 - ky;
                    let src = &dyp[y * wd + dy0..][..len];
                    let dst = &mut dx[iy * wd + dx0..][..len];
                    for (o, r) in dst.iter_mut().zip(src) {
                        *o += wv * *r;
                    }
                }
            }
        }
    }
}

pub fn conv2d_bwd_input_seq<T: Scalar>(
    dy: &[T],
    w: &[T],
    dims: (usize, usize, usize, usize, usize),
    dx: &mut [T],
) {
    let (_n, c, h, wd, f) = dims;
    for (p, plane) in dx.chunks_mut(h * wd).enumerate() {
        conv2d_dx_plane(dy, w, p / c, p % c, c, f, h, wd, plane);
    }
}

pub fn conv2d_bwd_input<T: Scalar>(
    dy: &[T],
    w: &[T],
    dims: (usize, usize, usize, usize, usize),
    dx: &mut [T],
) {
    #[cfg(feature = "parallel")]
    {
        let (n, c, h, wd, f) = dims;
        if n * c >= PAR_MIN_UNITS {
            dx.par_chunks_mut(h * wd).enumerate().for_each(|(p, plane)| {
                conv2d_dx_plane(dy, w, p / c, p % c, c, f, h, wd, plane);
            });
            return;
        }
    }
    conv2d_bwd_input_seq(dy, w, dims, dx);
}

/// Gradients for one filter: its [C,3,3] weight block and bias.
fn conv2d_dwf_block<T: Scalar>(
    x: &[T],
    dy: &[T],
    fi: usize,
    dims: (usize, usize, usize, usize, usize),
    dwf: &mut [T],
    dbf: &mut T,
) {
    let (n, c, h, wd, f) = dims;
    dwf.fill(T::ZERO);
    let mut db = T::ZERO;
    for ni in 0..n {
        let dyp = &dy[(ni * f + fi) * h * wd..][..h * wd];
        for v in dyp {
            db += *v;
        }
        for ci in 0..c {
            let xp = &x[(ni * c + ci) * h * wd..][..h * wd];
            for ky in 0..3usize {
                let (y0, y1) = row_span(ky, h);
                for kx in 0..3usize {
                    let (ox0, ix0, len) = col_span(kx, wd);
                    let mut acc = T::ZERO;
                    for y in y0..y1 {
                        let iy = y + ky - 1;
                        let a = &dyp[y * wd + ox0..][..len];
                        let b = &xp[iy * wd + ix0..][..len];
                        let mut dot = T::ZERO;
                        for (u, v) in a.iter().zip(b) {
                            dot += *u * *v;
                        }
                        acc += dot;
                    }
                    dwf[ci * 9 + ky * 3 + kx] += acc;
                }
            }
        }
    }
    *dbf = db;
}

pub fn conv2d_bwd_filter_seq<T: Scalar>(
    x: &[T],
    dy: &[T],
    dims: (usize, usize, usize, usize, usize),
    dw: &mut [T],
    db: &mut [T],
) {
    let c = dims.1;
    for (fi, (dwf, dbf)) in dw.chunks_mut(c * 9).zip(db.iter_mut()).enumerate() {
        conv2d_dwf_block(x, dy, fi, dims, dwf, dbf);
    }
}

pub fn conv2d_bwd_filter<T: Scalar>(
    x: &[T],
    dy: &[T],
    dims: (usize, usize, usize, usize, usize),
    dw: &mut [T],
    db: &mut [T],
) {
    #[cfg(feature = "parallel")]
    {
        let (_, c, _, _, f) = dims;
        if f >= PAR_MIN_UNITS {
            dw.par_chunks_mut(c * 9)
                .zip(db.par_iter_mut())
                .enumerate()
                .for_each(|(fi, (dwf, dbf))| conv2d_dwf_block(x, dy, fi, dims, dwf, dbf));
            return;
        }
    }
    conv2d_bwd_filter_seq(x, dy, dims, dw, db);
}

// ---------------------------------------------------------------------------
// dense: x [N,D]  w [D,K]  b [K]  out [N,K]
// ---------------------------------------------------------------------------

fn dense_row<T: Scalar>(x: &[T], w: &[T], b: &[T], ni: usize, d: usize, k: usize, out: &mut [T]) {
    out.copy_from_slice(b);
    let xr = &x[ni * d..][..d];
    for (di, &xv) in xr.iter().enumerate() {
        let wr = &w[di * k..][..k];
        for (o, r) in out.iter_mut().zip(wr) {
            *o += xv * *r;
        }
    }
}

pub fn dense_fwd_seq<T: Scalar>(x: &[T], w: &[T], b: &[T], dims: (usize, usize, usize), out: &mut [T]) {
    let (_n, d, k) = dims;
    for (ni, row) in out.chunks_mut(k).enumerate() {
        dense_row(x, w, b, ni, d, k, row);
    }
}

/// dims = (n, d, k)
pub fn dense_fwd<T: Scalar>(x: &[T], w: &[T], b: &[T], dims: (usize, usize, usize), out: &mut [T]) {
    #[cfg(feature = "parallel")]
    {
        let (n, d, k) = dims;
        if n >= PAR_MIN_UNITS && d * k >= 4096 {
            out.par_chunks_mut(k).enumerate().for_each(|(ni, row)| dense_row(x, w, b, ni, d, k, row));
            return;
        }
    }
    dense_fwd_seq(x, w, b, dims, out);
}

fn dense_dx_row<T: Scalar>(dy: &[T], w: &[T], ni: usize, _d: usize, k: usize, dxr: &mut [T]) {
    let dyr = &dy[ni * k..][..k];
    for (di, o) in dxr.iter_mut().enumerate() {
        let wr = &w[di * k..][..k];
        let mut dot = T::ZERO;
        for (u, v) in dyr.iter().zip(wr) {
            dot += *u * *v;
        }
        *o = dot;
    }
}

pub fn dense_bwd_input_seq<T: Scalar>(dy: &[T], w: &[T], dims: (usize, usize, usize), dx: &mut [T]) {
    let (_n, d, k) = dims;
    for (ni, dxr) in dx.chunks_mut(d).enumerate() {
        dense_dx_row(dy, w, ni, d, k, dxr);
    }
}

pub fn dense_bwd_input<T: Scalar>(dy: &[T], w: &[T], dims: (usize, usize, usize), dx: &mut [T]) {
    #[cfg(feature = "parallel")]
    {
        let (n, d, k) = dims;
        if n >= PAR_MIN_UNITS && d * k >= 4096 {
            dx.par_chunks_mut(d).enumerate().for_each(|(ni, dxr)| dense_dx_row(dy, w, ni, d, k, dxr));
            return;
        }
    }
    dense_bwd_input_seq(dy, w, dims, dx);
}

fn dense_dw_row<T: Scalar>(x: &[T], dy: &[T], di: usize, n: usize, d: usize, k: usize, dwr: &mut [T]) {
    dwr.fill(T::ZERO);
    for ni in 0..n {
        let xv = x[ni * d + di];
        let dyr = &dy[ni * k..][..k];
        for (o, r) in dwr.iter_mut().zip(dyr) {
            *o += xv * *r;
        }
    }
}

pub fn dense_bwd_weight_seq<T: Scalar>(
    x: &[T],
    dy: &[T],
    dims: (usize, usize, usize),
    dw: &mut [T],
    db: &mut [T],
) {
    let (n, d, k) = dims;
    for (di, dwr) in dw.chunks_mut(k).enumerate() {
        dense_dw_row(x, dy, di, n, d, k, dwr);
    }
    db.fill(T::ZERO);
    for ni in 0..n {
        let dyr = &dy[ni * k..][..k];
        for (o, r) in db.iter_mut().zip(dyr) {
            *o += *r;
        }
    }
}

pub fn dense_bwd_weight<T: Scalar>(
    x: &[T],
    dy: &[T],
    dims: (usize, usize, usize),
    dw: &mut [T],
    db: &mut [T],
) {
    #[cfg(feature = "parallel")]
    {
        let (n, d, k) = dims;
        if d >= PAR_MIN_UNITS && n * k >= 4096 {
            dw.par_chunks_mut(k)
                .enumerate()
                .for_each(|(di, dwr)| dense_dw_row(x, dy, di, n, d, k, dwr));
            db.fill(T::ZERO);
            for ni in 0..n {
                let dyr = &dy[ni * k..][..k];
                for (o, r) in db.iter_mut().zip(dyr) {
                    *o += *r;
                }
            }
            return;
        }
    }
    dense_bwd_weight_seq(x, dy, dims, dw, db);
}

// ---------------------------------------------------------------------------
// batchnorm2d helpers: x [N,F,H,W], per-channel statistics over N*H*W
// ---------------------------------------------------------------------------

/// Two-pass mean and biased variance of channel `c`.
fn bn_channel_stats<T: Scalar>(x: &[T], n: usize, f: usize, hw: usize, c: usize) -> (T, T) {
    let m = T::from_f64((n * hw) as f64);
    let mut s = T::ZERO;
    for ni in 0..n {
        let plane = &x[(ni * f + c) * hw..][..hw];
        let mut ps = T::ZERO;
        for v in plane {
            ps += *v;
        }
        s += ps;
    }
    let mu = s / m;
    let mut q = T::ZERO;
    for ni in 0..n {
        let plane = &x[(ni * f + c) * hw..][..hw];
        let mut pq = T::ZERO;
        for v in plane {
            let d = *v - mu;
            pq += d * d;
        }
        q += pq;
    }
    (mu, q / m)
}

pub fn bn_stats<T: Scalar>(x: &[T], n: usize, f: usize, hw: usize, mean: &mut [T], var: &mut [T]) {
    #[cfg(feature = "parallel")]
    {
        if f >= PAR_MIN_UNITS {
            mean.par_iter_mut()
                .zip(var.par_iter_mut())
                .enumerate()
                .for_each(|(c, (mc, vc))| {
                    let (mu, v) = bn_channel_stats(x, n, f, hw, c);
                    *mc = mu;
                    *vc = v;
                });
            return;
        }
    }
    for c in 0..f {
        let (mu, v) = bn_channel_stats(x, n, f, hw, c);
        mean[c] = mu;
        var[c] = v;
    }
}

/// out = (x - mean) * inv_std * gamma + beta, plane by plane.
pub fn bn_apply<T: Scalar>(
    x: &[T],
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
    f: usize,
    hw: usize,
    out: &mut [T],
) {
    let body = |p: usize, plane: &mut [T]| {
        let c = p % f;
        let (mu, b) = (mean[c], beta[c]);
        let scale = inv_std[c] * gamma[c];
        let xp = &x[p * hw..][..hw];
        for (o, v) in plane.iter_mut().zip(xp) {
            *o = (*v - mu) * scale + b;
        }
    };
    #[cfg(feature = "parallel")]
    {
        if out.len() / hw >= PAR_MIN_UNITS {
            out.par_chunks_mut(hw).enumerate().for_each(|(p, plane)| body(p, plane));
            return;
        }
    }
    for (p, plane) in out.chunks_mut(hw).enumerate() {
        body(p, plane);
    }
}

// ---------------------------------------------------------------------------
// maxpool 2x2 stride 2: x [N,F,H,W] -> out [N,F,H/2,W/2], argmax per cell
// ---------------------------------------------------------------------------

fn maxpool_plane<T: Scalar>(xp: &[T], h: usize, wd: usize, out: &mut [T], arg: &mut [u32]) {
    let (oh, ow) = (h / 2, wd / 2);
    for oy in 0..oh {
        for ox in 0..ow {
            // strict > keeps the first (row-major) index on ties
            let mut best_i = (2 * oy) * wd + 2 * ox;
            let mut best = xp[best_i];
            for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                let i = (2 * oy + dy) * wd + 2 * ox + dx;
                if xp[i] > best {
                    best = xp[i];
                    best_i = i;
                }
            }
            out[oy * ow + ox] = best;
            arg[oy * ow + ox] = best_i as u32;
        }
    }
}

pub fn maxpool_fwd_seq<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    wd: usize,
    out: &mut [T],
    arg: &mut [u32],
) {
    let (ihw, ohw) = (h * wd, (h / 2) * (wd / 2));
    for p in 0..planes {
        maxpool_plane(&x[p * ihw..][..ihw], h, wd, &mut out[p * ohw..][..ohw], &mut arg[p * ohw..][..ohw]);
    }
}

pub fn maxpool_fwd<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    wd: usize,
    out: &mut [T],
    arg: &mut [u32],
) {
    #[cfg(feature = "parallel")]
    {
        if planes >= PAR_MIN_UNITS {
            let (ihw, ohw) = (h * wd, (h / 2) * (wd / 2));
            out.par_chunks_mut(ohw)
                .zip(arg.par_chunks_mut(ohw))
                .enumerate()
                .for_each(|(p, (o, a))| maxpool_plane(&x[p * ihw..][..ihw], h, wd, o, a));
            return;
        }
    }
    maxpool_fwd_seq(x, planes, h, wd, out, arg);
}

pub fn maxpool_bwd<T: Scalar>(dy: &[T], arg: &[u32], planes: usize, h: usize, wd: usize, dx: &mut [T]) {
    let (ihw, ohw) = (h * wd, (h / 2) * (wd / 2));
    let body = |p: usize, dxp: &mut [T]| {
        dxp.fill(T::ZERO);
        let dyp = &dy[p * ohw..][..ohw];
        let argp = &arg[p * ohw..][..ohw];
        for (g, &i) in dyp.iter().zip(argp) {
            dxp[i as usize] += *g;
        }
    };
    #[cfg(feature = "parallel")]
    {
        if planes >= PAR_MIN_UNITS {
            dx.par_chunks_mut(ihw).enumerate().for_each(|(p, dxp)| body(p, dxp));
            return;
        }
    }
    for (p, dxp) in dx.chunks_mut(ihw).enumerate() {
        body(p, dxp);
    }
}
