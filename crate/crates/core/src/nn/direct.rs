//! Direct stride-1 "same" convolution kernels for narrow layers, where
//! im2col plus GEMM is bound by memory traffic. Requires AVX2 and FMA;
//! callers fall back to the GEMM path otherwise.

#[cfg(target_arch = "x86_64")]
use std::arch::x86_64::*;

/// Output channels per register block in the forward kernel.
const CB: usize = 4;
/// Pixels per register block (two 8-lane vectors).
const XB: usize = 16;
/// Rows per band in the weight-gradient kernel.
const WG_BAND: usize = 16;

pub fn available() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Zero-padded copy of `c` planes (`h x w`): `pad` rows/cols before,
/// rows padded to `row_len`, plus `pad` rows after.
fn pad_planes(src: &[f32], c: usize, h: usize, w: usize, pad: usize, row_len: usize) -> Vec<f32> {
    let ph = h + 2 * pad;
    let mut out = vec![0.0f32; c * ph * row_len];
    for ci in 0..c {
        for y in 0..h {
            let d = (ci * ph + y + pad) * row_len + pad;
            out[d..d + w].copy_from_slice(&src[(ci * h + y) * w..(ci * h + y + 1) * w]);
        }
    }
    out
}

/// `out[co] = bias[co] + sum_{ci,ky,kx} w[co][ci][ky][kx] * x[ci][y+ky-p][x+kx-p]`
/// for one sample, with `weight` in `[cout][cin][k][k]` layout.
/// When `flip` is set, the weight is read as the adjoint (`[cin][cout]`
/// swapped, kernel rotated), giving the input gradient of a same conv.
#[allow(clippy::too_many_arguments)]
pub fn conv_same(
    x: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    weight: &[f32],
    cout: usize,
    bias: Option<&[f32]>,
    flip: bool,
    out: &mut [f32],
) {
    let p = k / 2;
    let wr = round_up(w, XB);
    let row_len = wr + k - 1;
    let xp = pad_planes(x, cin, h, w, p, row_len);
    let coutp = round_up(cout, CB);
    // Repack to [ci][ky][kx][co] with zero-padded output channels.
    let mut wt = vec![0.0f32; cin * k * k * coutp];
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let v = if flip {
                        // Adjoint: stored as [ci_orig = co][co_orig = ci], rotated 180°.
                        weight[((ci * cout + co) * k + (k - 1 - ky)) * k + (k - 1 - kx)]
                    } else {
                        weight[((co * cin + ci) * k + ky) * k + kx]
                    };
                    wt[((ci * k + ky) * k + kx) * coutp + co] = v;
                }
            }
        }
    }
    let mut row = vec![0.0f32; CB * wr];
    let ph = h + 2 * p;
    for y in 0..h {
        for co0 in (0..coutp).step_by(CB) {
            // SAFETY: `available()` was checked by the caller; all reads stay
            // inside `xp`/`wt` because rows are padded to `wr + k - 1`.
            unsafe { forward_row(&xp, cin, ph, row_len, y, k, &wt, coutp, co0, wr, &mut row) };
            for c in 0..CB.min(cout - co0) {
                let co = co0 + c;
                let b = bias.map_or(0.0, |b| b[co]);
                let dst = &mut out[(co * h + y) * w..(co * h + y + 1) * w];
                for (d, s) in dst.iter_mut().zip(&row[c * wr..c * wr + w]) {
                    *d = s + b;
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn forward_row(
    xp: &[f32],
    cin: usize,
    ph: usize,
    row_len: usize,
    y: usize,
    k: usize,
    wt: &[f32],
    coutp: usize,
    co0: usize,
    wr: usize,
    row: &mut [f32],
) {
    let xptr = xp.as_ptr();
    let wptr = wt.as_ptr();
    for x0 in (0..wr).step_by(XB) {
        let mut a0 = [_mm256_setzero_ps(); CB];
        let mut a1 = [_mm256_setzero_ps(); CB];
        for ci in 0..cin {
            for ky in 0..k {
                let base = xptr.add((ci * ph + y + ky) * row_len + x0);
                let wbase = wptr.add(((ci * k + ky) * k) * coutp + co0);
                for kx in 0..k {
                    let v0 = _mm256_loadu_ps(base.add(kx));
                    let v1 = _mm256_loadu_ps(base.add(kx + 8));
                    let wk = wbase.add(kx * coutp);
                    for c in 0..CB {
                        let b = _mm256_broadcast_ss(&*wk.add(c));
                        a0[c] = _mm256_fmadd_ps(b, v0, a0[c]);
                        a1[c] = _mm256_fmadd_ps(b, v1, a1[c]);
                    }
                }
            }
        }
        for c in 0..CB {
            _mm256_storeu_ps(row.as_mut_ptr().add(c * wr + x0), a0[c]);
            _mm256_storeu_ps(row.as_mut_ptr().add(c * wr + x0 + 8), a1[c]);
        }
    }
}

#[cfg(not(target_arch = "x86_64"))]
#[allow(clippy::too_many_arguments)]
unsafe fn forward_row(_: &[f32], _: usize, _: usize, _: usize, _: usize, _: usize, _: &[f32], _: usize, _: usize, _: usize, _: &mut [f32]) {
    unreachable!("direct kernels require x86_64")
}

/// Accumulates `dw[co][ci][ky][kx] += sum_{y,x} g[co][y][x] * x[ci][y+ky-p][x+kx-p]`
/// for one sample.
#[allow(clippy::too_many_arguments)]
pub fn conv_same_weight_grad(x: &[f32], cin: usize, h: usize, w: usize, k: usize, g: &[f32], cout: usize, dw: &mut [f32]) {
    match k {
        3 => weight_grad::<4, 3>(x, cin, h, w, g, cout, dw),
        5 => weight_grad::<2, 5>(x, cin, h, w, g, cout, dw),
        7 => weight_grad::<2, 7>(x, cin, h, w, g, cout, dw),
        1 => weight_grad::<4, 1>(x, cin, h, w, g, cout, dw),
        _ => panic!("kernel size {k} has no direct weight-gradient kernel"),
    }
}

fn weight_grad<const NC: usize, const K: usize>(
    x: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    g: &[f32],
    cout: usize,
    dw: &mut [f32],
) {
    let p = K / 2;
    let wr = round_up(w, 8);
    let row_len = wr + K - 1;
    let xp = pad_planes(x, cin, h, w, p, row_len);
    // Gradient rows (and channels) padded with zeros so tail lanes contribute nothing.
    let coutp = round_up(cout, NC);
    let mut gp = vec![0.0f32; coutp * h * wr];
    for co in 0..cout {
        for y in 0..h {
            gp[(co * h + y) * wr..(co * h + y) * wr + w].copy_from_slice(&g[(co * h + y) * w..(co * h + y + 1) * w]);
        }
    }
    let ph = h + 2 * p;
    let mut sums = [[0.0f32; K]; NC];
    // Row bands keep one input band and the matching gradient rows cache-resident.
    for y0 in (0..h).step_by(WG_BAND) {
        let rows = y0..(y0 + WG_BAND).min(h);
        for ci in 0..cin {
            for ky in 0..K {
                for co0 in (0..coutp).step_by(NC) {
                    // SAFETY: feature availability checked by the caller; reads are
                    // within the padded buffers.
                    unsafe { weight_grad_taps::<NC, K>(&xp, &gp, ci, co0, ky, rows.clone(), h, ph, row_len, wr, &mut sums) };
                    for (c, row) in sums.iter().enumerate() {
                        let co = co0 + c;
                        if co < cout {
                            let d = &mut dw[((co * cin + ci) * K + ky) * K..((co * cin + ci) * K + ky + 1) * K];
                            d.iter_mut().zip(row).for_each(|(a, s)| *a += s);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn weight_grad_taps<const NC: usize, const K: usize>(
    xp: &[f32],
    gp: &[f32],
    ci: usize,
    co0: usize,
    ky: usize,
    rows: std::ops::Range<usize>,
    h: usize,
    ph: usize,
    row_len: usize,
    wr: usize,
    sums: &mut [[f32; K]; NC],
) {
    let mut acc = [[_mm256_setzero_ps(); K]; NC];
    let (xptr, gptr) = (xp.as_ptr(), gp.as_ptr());
    for y in rows {
        let xrow = xptr.add((ci * ph + y + ky) * row_len);
        for x0 in (0..wr).step_by(8) {
            let mut gv = [_mm256_setzero_ps(); NC];
            for (c, v) in gv.iter_mut().enumerate() {
                *v = _mm256_loadu_ps(gptr.add(((co0 + c) * h + y) * wr + x0));
            }
            for kx in 0..K {
                let xv = _mm256_loadu_ps(xrow.add(x0 + kx));
                for c in 0..NC {
                    acc[c][kx] = _mm256_fmadd_ps(gv[c], xv, acc[c][kx]);
                }
            }
        }
    }
    for c in 0..NC {
        for kx in 0..K {
            let mut lanes = [0.0f32; 8];
            _mm256_storeu_ps(lanes.as_mut_ptr(), acc[c][kx]);
            sums[c][kx] = lanes.iter().sum();
        }
    }
}

#[cfg(not(target_arch = "x86_64"))]
#[allow(clippy::too_many_arguments)]
unsafe fn weight_grad_taps<const NC: usize, const K: usize>(
    _: &[f32],
    _: &[f32],
    _: usize,
    _: usize,
    _: usize,
    _: std::ops::Range<usize>,
    _: usize,
    _: usize,
    _: usize,
    _: usize,
    _: &mut [[f32; K]; NC],
) {
    unreachable!("direct kernels require x86_64")
}
