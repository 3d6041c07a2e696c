//! Raw compute kernels shared by the tape and by pure-forward paths.
//!
//! Row-parallel loops use fixed chunk sizes so results are bit-identical
//! for any worker count.

use crate::parallel::{fixed_chunks, par_chunk_map, par_fill_rows};

const ROW_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Replicate,
}

/// y[n, co] = sum_ci x[n, ci] * w[ci, co] + b[co]
pub fn matmul_bias_fwd(x: &[f64], n: usize, cin: usize, w: &[f64], b: &[f64], cout: usize, y: &mut [f64]) {
    debug_assert_eq!(x.len(), n * cin);
    debug_assert_eq!(w.len(), cin * cout);
    debug_assert_eq!(y.len(), n * cout);
    par_fill_rows(y, n, cout, ROW_CHUNK, |i, row| {
        row.copy_from_slice(b);
        let xr = &x[i * cin..(i + 1) * cin];
        for (k, &xv) in xr.iter().enumerate() {
            if xv != 0.0 {
                let wr = &w[k * cout..(k + 1) * cout];
                for (c, &wv) in wr.iter().enumerate() {
                    row[c] += xv * wv;
                }
            }
        }
    });
}

/// Gradients of `matmul_bias_fwd`.
pub fn matmul_bias_bwd(
    x: &[f64],
    n: usize,
    cin: usize,
    w: &[f64],
    cout: usize,
    dy: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    // dx[n, ci] = dot(dy[n, :], w[ci, :])
    par_fill_rows(dx, n, cin, ROW_CHUNK, |i, row| {
        let dyr = &dy[i * cout..(i + 1) * cout];
        for (k, slot) in row.iter_mut().enumerate() {
            let wr = &w[k * cout..(k + 1) * cout];
            let mut acc = 0.0;
            for c in 0..cout {
                acc += dyr[c] * wr[c];
            }
            *slot += acc;
        }
    });
    // dw and db accumulated over fixed row chunks, combined in order
    let partials = par_chunk_map(n, ROW_CHUNK, |range| {
        let mut pw = vec![0.0; cin * cout];
        let mut pb = vec![0.0; cout];
        for i in range {
            let xr = &x[i * cin..(i + 1) * cin];
            let dyr = &dy[i * cout..(i + 1) * cout];
            for (k, &xv) in xr.iter().enumerate() {
                if xv != 0.0 {
                    let pwr = &mut pw[k * cout..(k + 1) * cout];
                    for c in 0..cout {
                        pwr[c] += xv * dyr[c];
                    }
                }
            }
            for c in 0..cout {
                pb[c] += dyr[c];
            }
        }
        (pw, pb)
    });
    for (pw, pb) in partials {
        for (a, b) in dw.iter_mut().zip(pw) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(pb) {
            *a += b;
        }
    }
}

/// 1D convolution over the middle axis, zero padding, stride 1.
/// x: [N, L, Cin], w: [K, Cin, Cout], y: [N, L, Cout]
pub fn conv1d_fwd(
    x: &[f64],
    n: usize,
    l: usize,
    cin: usize,
    w: &[f64],
    b: &[f64],
    k: usize,
    cout: usize,
    y: &mut [f64],
) {
    let p = (k - 1) / 2;
    par_fill_rows(y, n, l * cout, ROW_CHUNK.max(8), |i, yrow| {
        let xrow = &x[i * l * cin..(i + 1) * l * cin];
        for li in 0..l {
            let yr = &mut yrow[li * cout..(li + 1) * cout];
            yr.copy_from_slice(b);
            for t in 0..k {
                let ls = li + t;
                if ls < p || ls - p >= l {
                    continue;
                }
                let ls = ls - p;
                let xr = &xrow[ls * cin..(ls + 1) * cin];
                let wt = &w[t * cin * cout..(t + 1) * cin * cout];
                for (ci, &xv) in xr.iter().enumerate() {
                    if xv != 0.0 {
                        let wr = &wt[ci * cout..(ci + 1) * cout];
                        for c in 0..cout {
                            yr[c] += xv * wr[c];
                        }
                    }
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
pub fn conv1d_bwd(
    x: &[f64],
    n: usize,
    l: usize,
    cin: usize,
    w: &[f64],
    k: usize,
    cout: usize,
    dy: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    let p = (k - 1) / 2;
    par_fill_rows(dx, n, l * cin, ROW_CHUNK.max(8), |i, dxrow| {
        let dyrow = &dy[i * l * cout..(i + 1) * l * cout];
        for li in 0..l {
            let dyr = &dyrow[li * cout..(li + 1) * cout];
            for t in 0..k {
                let ls = li + t;
                if ls < p || ls - p >= l {
                    continue;
                }
                let ls = ls - p;
                let dxr = &mut dxrow[ls * cin..(ls + 1) * cin];
                let wt = &w[t * cin * cout..(t + 1) * cin * cout];
                for ci in 0..cin {
                    let wr = &wt[ci * cout..(ci + 1) * cout];
                    let mut acc = 0.0;
                    for c in 0..cout {
                        acc += dyr[c] * wr[c];
                    }
                    dxr[ci] += acc;
                }
            }
        }
    });
    let partials = par_chunk_map(n, ROW_CHUNK.max(8), |range| {
        let mut pw = vec![0.0; k * cin * cout];
        let mut pb = vec![0.0; cout];
        for i in range {
            let xrow = &x[i * l * cin..(i + 1) * l * cin];
            let dyrow = &dy[i * l * cout..(i + 1) * l * cout];
            for li in 0..l {
                let dyr = &dyrow[li * cout..(li + 1) * cout];
                for t in 0..k {
                    let ls = li + t;
                    if ls < p || ls - p >= l {
                        continue;
                    }
                    let ls = ls - p;
                    let xr = &xrow[ls * cin..(ls + 1) * cin];
                    let pwt = &mut pw[t * cin * cout..(t + 1) * cin * cout];
                    for (ci, &xv) in xr.iter().enumerate() {
                        if xv != 0.0 {
                            let pwr = &mut pwt[ci * cout..(ci + 1) * cout];
                            for c in 0..cout {
                                pwr[c] += xv * dyr[c];
                            }
                        }
                    }
                }
                for c in 0..cout {
                    pb[c] += dyr[c];
                }
            }
        }
        (pw, pb)
    });
    for (pw, pb) in partials {
        for (a, b) in dw.iter_mut().zip(pw) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(pb) {
            *a += b;
        }
    }
}

/// Output spatial extent of a strided convolution with pad (k-1)/2.
pub fn conv_out_extent(len: usize, k: usize, stride: usize) -> usize {
    let p = (k - 1) / 2;
    (len + 2 * p - k) / stride + 1
}

/// 2D convolution, cross-correlation semantics.
/// x: [H, W, Cin], w: [KH, KW, Cin, Cout], y: [H', W', Cout]
#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd(
    x: &[f64],
    h: usize,
    wd: usize,
    cin: usize,
    w: &[f64],
    b: &[f64],
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: PadMode,
    y: &mut [f64],
) {
    let oh = conv_out_extent(h, kh, stride);
    let ow = conv_out_extent(wd, kw, stride);
    let ph = (kh - 1) / 2;
    let pw = (kw - 1) / 2;
    debug_assert_eq!(y.len(), oh * ow * cout);
    par_fill_rows(y, oh, ow * cout, 8, |oy, yrow| {
        for ox in 0..ow {
            let yr = &mut yrow[ox * cout..(ox + 1) * cout];
            yr.copy_from_slice(b);
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - ph as isize;
                let iy = match pad {
                    PadMode::Zero => {
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        iy as usize
                    }
                    PadMode::Replicate => iy.clamp(0, h as isize - 1) as usize,
                };
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pw as isize;
                    let ix = match pad {
                        PadMode::Zero => {
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            ix as usize
                        }
                        PadMode::Replicate => ix.clamp(0, wd as isize - 1) as usize,
                    };
                    let xr = &x[(iy * wd + ix) * cin..(iy * wd + ix + 1) * cin];
                    let wt = &w[((ky * kw + kx) * cin) * cout..((ky * kw + kx) * cin + cin) * cout];
                    for (ci, &xv) in xr.iter().enumerate() {
                        if xv != 0.0 {
                            let wr = &wt[ci * cout..(ci + 1) * cout];
                            for c in 0..cout {
                                yr[c] += xv * wr[c];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Gradients of `conv2d_fwd`. dX is accumulated serially (input taps of
/// neighboring output rows overlap).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd(
    x: &[f64],
    h: usize,
    wd: usize,
    cin: usize,
    w: &[f64],
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: PadMode,
    dy: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    let oh = conv_out_extent(h, kh, stride);
    let ow = conv_out_extent(wd, kw, stride);
    let ph = (kh - 1) / 2;
    let pw = (kw - 1) / 2;
    for oy in 0..oh {
        for ox in 0..ow {
            let dyr = &dy[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            for c in 0..cout {
                db[c] += dyr[c];
            }
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - ph as isize;
                let iy = match pad {
                    PadMode::Zero => {
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        iy as usize
                    }
                    PadMode::Replicate => iy.clamp(0, h as isize - 1) as usize,
                };
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pw as isize;
                    let ix = match pad {
                        PadMode::Zero => {
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            ix as usize
                        }
                        PadMode::Replicate => ix.clamp(0, wd as isize - 1) as usize,
                    };
                    let base = (iy * wd + ix) * cin;
                    let xr = &x[base..base + cin];
                    let wbase = ((ky * kw + kx) * cin) * cout;
                    for ci in 0..cin {
                        let wr = &w[wbase + ci * cout..wbase + (ci + 1) * cout];
                        let mut acc = 0.0;
                        for c in 0..cout {
                            acc += dyr[c] * wr[c];
                        }
                        dx[base + ci] += acc;
                        let xv = xr[ci];
                        if xv != 0.0 {
                            let dwr = &mut dw[wbase + ci * cout..wbase + (ci + 1) * cout];
                            for c in 0..cout {
                                dwr[c] += xv * dyr[c];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Group normalization over x: [N, M, C] — statistics per (instance n,
/// group g) over the M * C/G elements of the group. Returns per-(n,g)
/// (mean, inv_std) for the backward pass.
pub fn group_norm_fwd(
    x: &[f64],
    n: usize,
    m: usize,
    c: usize,
    groups: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    y: &mut [f64],
) -> Vec<(f64, f64)> {
    debug_assert_eq!(c % groups, 0);
    let gc = c / groups;
    let stats_chunks = par_chunk_map(n, 64, |range| {
        let mut out = Vec::with_capacity((range.end - range.start) * groups);
        for i in range {
            let xi = &x[i * m * c..(i + 1) * m * c];
            for g in 0..groups {
                let mut sum = 0.0;
                let mut sq = 0.0;
                for mi in 0..m {
                    let row = &xi[mi * c + g * gc..mi * c + (g + 1) * gc];
                    for &v in row {
                        sum += v;
                        sq += v * v;
                    }
                }
                let cnt = (m * gc) as f64;
                let mean = sum / cnt;
                let var = (sq / cnt - mean * mean).max(0.0);
                out.push((mean, 1.0 / (var + eps).sqrt()));
            }
        }
        out
    });
    let stats: Vec<(f64, f64)> = stats_chunks.into_iter().flatten().collect();
    par_fill_rows(y, n, m * c, 64, |i, yrow| {
        let xi = &x[i * m * c..(i + 1) * m * c];
        for g in 0..groups {
            let (mean, inv_std) = stats[i * groups + g];
            for mi in 0..m {
                let off = mi * c + g * gc;
                for j in 0..gc {
                    let ch = g * gc + j;
                    yrow[off + j] = gamma[ch] * (xi[off + j] - mean) * inv_std + beta[ch];
                }
            }
        }
    });
    stats
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_bwd(
    x: &[f64],
    n: usize,
    m: usize,
    c: usize,
    groups: usize,
    gamma: &[f64],
    stats: &[(f64, f64)],
    dy: &[f64],
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    let gc = c / groups;
    let cnt = (m * gc) as f64;
    par_fill_rows(dx, n, m * c, 64, |i, dxrow| {
        let xi = &x[i * m * c..(i + 1) * m * c];
        let dyi = &dy[i * m * c..(i + 1) * m * c];
        for g in 0..groups {
            let (mean, inv_std) = stats[i * groups + g];
            // accumulate the two reductions per group
            let mut sum_dxh = 0.0;
            let mut sum_dxh_xh = 0.0;
            for mi in 0..m {
                let off = mi * c + g * gc;
                for j in 0..gc {
                    let ch = g * gc + j;
                    let xh = (xi[off + j] - mean) * inv_std;
                    let dxh = dyi[off + j] * gamma[ch];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh;
                }
            }
            for mi in 0..m {
                let off = mi * c + g * gc;
                for j in 0..gc {
                    let ch = g * gc + j;
                    let xh = (xi[off + j] - mean) * inv_std;
                    let dxh = dyi[off + j] * gamma[ch];
                    dxrow[off + j] +=
                        inv_std * (dxh - sum_dxh / cnt - xh * sum_dxh_xh / cnt);
                }
            }
        }
    });
    let partials = par_chunk_map(n, 64, |range| {
        let mut pg = vec![0.0; c];
        let mut pb = vec![0.0; c];
        for i in range {
            let xi = &x[i * m * c..(i + 1) * m * c];
            let dyi = &dy[i * m * c..(i + 1) * m * c];
            for g in 0..groups {
                let (mean, inv_std) = stats[i * groups + g];
                for mi in 0..m {
                    let off = mi * c + g * gc;
                    for j in 0..gc {
                        let ch = g * gc + j;
                        let xh = (xi[off + j] - mean) * inv_std;
                        pg[ch] += dyi[off + j] * xh;
                        pb[ch] += dyi[off + j];
                    }
                }
            }
        }
        (pg, pb)
    });
    for (pg, pb) in partials {
        for (a, b) in dgamma.iter_mut().zip(pg) {
            *a += b;
        }
        for (a, b) in dbeta.iter_mut().zip(pb) {
            *a += b;
        }
    }
}

/// Row-wise softmax over x: [N, K].
pub fn softmax_fwd(x: &[f64], n: usize, k: usize, y: &mut [f64]) {
    par_fill_rows(y, n, k, ROW_CHUNK, |i, yr| {
        let xr = &x[i * k..(i + 1) * k];
        let mx = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &v) in xr.iter().enumerate() {
            let e = (v - mx).exp();
            yr[j] = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for v in yr.iter_mut() {
            *v *= inv;
        }
    });
}

pub fn softmax_bwd(y: &[f64], n: usize, k: usize, dy: &[f64], dx: &mut [f64]) {
    par_fill_rows(dx, n, k, ROW_CHUNK, |i, dxr| {
        let yr = &y[i * k..(i + 1) * k];
        let dyr = &dy[i * k..(i + 1) * k];
        let mut dot = 0.0;
        for j in 0..k {
            dot += yr[j] * dyr[j];
        }
        for j in 0..k {
            dxr[j] += yr[j] * (dyr[j] - dot);
        }
    });
}

/// Weighted gather: out[r, :] = sum_j w[r, j] * v[idx[r, j], :], with
/// idx < 0 contributing zeros.
pub fn gather_weighted_fwd(
    v: &[f64],
    c: usize,
    idx: &[i64],
    w: &[f64],
    rows: usize,
    taps: usize,
    out: &mut [f64],
) {
    par_fill_rows(out, rows, c, ROW_CHUNK, |r, orow| {
        for j in 0..taps {
            let id = idx[r * taps + j];
            if id < 0 {
                continue;
            }
            let wv = w[r * taps + j];
            if wv == 0.0 {
                continue;
            }
            let vr = &v[id as usize * c..(id as usize + 1) * c];
            for ch in 0..c {
                orow[ch] += wv * vr[ch];
            }
        }
    });
}

/// Scatter half of the weighted gather; serial so accumulation order is
/// fixed.
pub fn gather_weighted_bwd(
    dv: &mut [f64],
    c: usize,
    idx: &[i64],
    w: &[f64],
    rows: usize,
    taps: usize,
    dout: &[f64],
) {
    for r in 0..rows {
        let dor = &dout[r * c..(r + 1) * c];
        for j in 0..taps {
            let id = idx[r * taps + j];
            if id < 0 {
                continue;
            }
            let wv = w[r * taps + j];
            if wv == 0.0 {
                continue;
            }
            let dvr = &mut dv[id as usize * c..(id as usize + 1) * c];
            for ch in 0..c {
                dvr[ch] += wv * dor[ch];
            }
        }
    }
}

/// Per-channel max over contiguous row segments. Ties resolve to the first
/// row. Returns argmax rows for the backward pass; empty segments yield
/// zero rows and argmax u32::MAX.
pub fn segment_max_fwd(
    x: &[f64],
    c: usize,
    segments: &[(u32, u32)],
    out: &mut [f64],
    argmax: &mut [u32],
) {
    let nseg = segments.len();
    debug_assert_eq!(out.len(), nseg * c);
    let seg_chunks = fixed_chunks(nseg, 512);
    // rows are disjoint per segment; fill in parallel
    par_fill_rows(out, nseg, c, 512, |s, orow| {
        let (start, end) = segments[s];
        if start == end {
            return;
        }
        let first = &x[start as usize * c..(start as usize + 1) * c];
        orow.copy_from_slice(first);
        for r in start + 1..end {
            let xr = &x[r as usize * c..(r as usize + 1) * c];
            for ch in 0..c {
                if xr[ch] > orow[ch] {
                    orow[ch] = xr[ch];
                }
            }
        }
    });
    // second pass for argmax (recomputed; keeps the parallel fill simple)
    let parts: Vec<Vec<u32>> = seg_chunks
        .into_iter()
        .map(|range| {
            let mut part = vec![u32::MAX; (range.end - range.start) * c];
            for (li, s) in range.clone().enumerate() {
                let (start, end) = segments[s];
                if start == end {
                    continue;
                }
                let arow = &mut part[li * c..(li + 1) * c];
                let mut best = vec![f64::NEG_INFINITY; c];
                for r in start..end {
                    let xr = &x[r as usize * c..(r as usize + 1) * c];
                    for ch in 0..c {
                        if xr[ch] > best[ch] {
                            best[ch] = xr[ch];
                            arow[ch] = r;
                        }
                    }
                }
            }
            part
        })
        .collect();
    let mut off = 0;
    for part in parts {
        argmax[off..off + part.len()].copy_from_slice(&part);
        off += part.len();
    }
}

pub fn segment_max_bwd(dx: &mut [f64], c: usize, argmax: &[u32], dout: &[f64], nseg: usize) {
    for s in 0..nseg {
        for ch in 0..c {
            let r = argmax[s * c + ch];
            if r != u32::MAX {
                dx[r as usize * c + ch] += dout[s * c + ch];
            }
        }
    }
}

pub fn relu_fwd(x: &[f64], y: &mut [f64]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o = if v > 0.0 { v } else { 0.0 };
    }
}

pub fn relu_bwd(x: &[f64], dy: &[f64], dx: &mut [f64]) {
    for i in 0..x.len() {
        if x[i] > 0.0 {
            dx[i] += dy[i];
        }
    }
}
