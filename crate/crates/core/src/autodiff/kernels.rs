//! Forward and adjoint kernels shared by the tape primitives.
//!
//! Spatial kernels operate on channels-last buffers (`[H, W, C]`).

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// `c (+)= a · b` for row-major `a: [m,k]`, `b: [k,n]`, `c: [m,n]`.
pub fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, accumulate: bool) {
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked by the callers against (m, k, n),
    // and the strides describe dense row-major storage inside those slices.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `ga += g · bᵀ` where `g: [m,n]`, `b: [k,n]`.
pub fn matmul_grad_a(g: &[f64], b: &[f64], ga: &mut [f64], m: usize, k: usize, n: usize) {
    // SAFETY: see `matmul_into`; bᵀ is read through swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            m, n, k, 1.0,
            g.as_ptr(), n as isize, 1,
            b.as_ptr(), 1, n as isize,
            1.0,
            ga.as_mut_ptr(), k as isize, 1,
        );
    }
}

/// `gb += aᵀ · g` where `a: [m,k]`, `g: [m,n]`.
pub fn matmul_grad_b(a: &[f64], g: &[f64], gb: &mut [f64], m: usize, k: usize, n: usize) {
    // SAFETY: see `matmul_into`; aᵀ is read through swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            k, m, n, 1.0,
            a.as_ptr(), 1, k as isize,
            g.as_ptr(), n as isize, 1,
            1.0,
            gb.as_mut_ptr(), n as isize, 1,
        );
    }
}

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * FRAC_1_SQRT_2))
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact GELU, `x · Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Half-open bin `[floor(i·n/p), ceil((i+1)·n/p))` of adaptive pooling.
pub fn pool_bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = (i * input) / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

pub fn adaptive_avg_pool(x: &[f64], h: usize, w: usize, c: usize, ph: usize, pw: usize) -> Vec<f64> {
    let mut out = vec![0.0; ph * pw * c];
    for oy in 0..ph {
        let (y0, y1) = pool_bin(oy, h, ph);
        for ox in 0..pw {
            let (x0, x1) = pool_bin(ox, w, pw);
            let inv = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
            let dst = &mut out[(oy * pw + ox) * c..(oy * pw + ox + 1) * c];
            for y in y0..y1 {
                for xx in x0..x1 {
                    let src = &x[(y * w + xx) * c..(y * w + xx + 1) * c];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
    }
    out
}

pub fn adaptive_avg_pool_backward(
    g: &[f64],
    gx: &mut [f64],
    h: usize,
    w: usize,
    c: usize,
    ph: usize,
    pw: usize,
) {
    for oy in 0..ph {
        let (y0, y1) = pool_bin(oy, h, ph);
        for ox in 0..pw {
            let (x0, x1) = pool_bin(ox, w, pw);
            let inv = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
            let src = &g[(oy * pw + ox) * c..(oy * pw + ox + 1) * c];
            for y in y0..y1 {
                for xx in x0..x1 {
                    let dst = &mut gx[(y * w + xx) * c..(y * w + xx + 1) * c];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s * inv;
                    }
                }
            }
        }
    }
}

/// Source taps `(i0, i1, frac)` for one output coordinate, half-pixel
/// (align-corners = false) convention with negative coordinates clamped.
pub fn bilinear_taps(dst: usize, input: usize, output: usize) -> (usize, usize, f64) {
    let scale = input as f64 / output as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(input - 1);
    let i1 = (i0 + 1).min(input - 1);
    let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
    (i0, i1, frac)
}

pub fn bilinear(x: &[f64], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        let (y0, y1, fy) = bilinear_taps(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1, fx) = bilinear_taps(ox, w, ow);
            let taps = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ];
            let dst = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for (yy, xx, wt) in taps {
                if wt == 0.0 {
                    continue;
                }
                let src = &x[(yy * w + xx) * c..(yy * w + xx + 1) * c];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wt * s;
                }
            }
        }
    }
    out
}

pub fn bilinear_backward(g: &[f64], gx: &mut [f64], h: usize, w: usize, c: usize, oh: usize, ow: usize) {
    for oy in 0..oh {
        let (y0, y1, fy) = bilinear_taps(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1, fx) = bilinear_taps(ox, w, ow);
            let taps = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ];
            let src = &g[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for (yy, xx, wt) in taps {
                if wt == 0.0 {
                    continue;
                }
                let dst = &mut gx[(yy * w + xx) * c..(yy * w + xx + 1) * c];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wt * s;
                }
            }
        }
    }
}

/// Per-channel 3×3 correlation with zero padding 1; kernel layout `[3, 3, C]`.
pub fn depthwise3x3(x: &[f64], k: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let dst = &mut out[(y * w + xx) * c..(y * w + xx + 1) * c];
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = &x[(sy as usize * w + sx as usize) * c..][..c];
                    let kern = &k[(ky * 3 + kx) * c..][..c];
                    for ((d, s), kv) in dst.iter_mut().zip(src).zip(kern) {
                        *d += s * kv;
                    }
                }
            }
        }
    }
    out
}

pub fn depthwise3x3_backward(
    g: &[f64],
    x: &[f64],
    k: &[f64],
    gx: Option<&mut [f64]>,
    gk: Option<&mut [f64]>,
    h: usize,
    w: usize,
    c: usize,
) {
    let mut gx = gx;
    let mut gk = gk;
    for y in 0..h {
        for xx in 0..w {
            let go = &g[(y * w + xx) * c..(y * w + xx + 1) * c];
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let base = (sy as usize * w + sx as usize) * c;
                    let kbase = (ky * 3 + kx) * c;
                    if let Some(gx) = gx.as_deref_mut() {
                        for ch in 0..c {
                            gx[base + ch] += go[ch] * k[kbase + ch];
                        }
                    }
                    if let Some(gk) = gk.as_deref_mut() {
                        for ch in 0..c {
                            gk[kbase + ch] += go[ch] * x[base + ch];
                        }
                    }
                }
            }
        }
    }
}

/// Output extent of a strided, padded convolution.
pub fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Patch matrix `[OH·OW, KH·KW·C]` for a strided, zero-padded convolution.
pub fn im2col(
    x: &[f64],
    h: usize,
    w: usize,
    c: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let row = kernel * kernel * c;
    let mut out = vec![0.0; oh * ow * row];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst_row = &mut out[(oy * ow + ox) * row..(oy * ow + ox + 1) * row];
            for ky in 0..kernel {
                let sy = (oy * stride + ky) as isize - pad as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..kernel {
                    let sx = (ox * stride + kx) as isize - pad as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = &x[(sy as usize * w + sx as usize) * c..][..c];
                    dst_row[(ky * kernel + kx) * c..][..c].copy_from_slice(src);
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn im2col_backward(
    g: &[f64],
    gx: &mut [f64],
    h: usize,
    w: usize,
    c: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let row = kernel * kernel * c;
    for oy in 0..oh {
        for ox in 0..ow {
            let src_row = &g[(oy * ow + ox) * row..(oy * ow + ox + 1) * row];
            for ky in 0..kernel {
                let sy = (oy * stride + ky) as isize - pad as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..kernel {
                    let sx = (ox * stride + kx) as isize - pad as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = &mut gx[(sy as usize * w + sx as usize) * c..][..c];
                    for (d, s) in dst.iter_mut().zip(&src_row[(ky * kernel + kx) * c..][..c]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_bins_cover_input() {
        assert_eq!(pool_bin(0, 3, 2), (0, 2));
        assert_eq!(pool_bin(1, 3, 2), (1, 3));
        // upsampling: 2 -> 4 repeats rows
        let bins: Vec<_> = (0..4).map(|i| pool_bin(i, 2, 4)).collect();
        assert_eq!(bins, vec![(0, 1), (0, 1), (1, 2), (1, 2)]);
    }

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul_into(&a, &b, &mut c, 2, 2, 2, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn conv_out_sizes() {
        // overlapping patch embedding: kernel 2s-1, padding s-1 gives ceil(n/s)
        for s in [2usize, 4] {
            for n in 1..40usize {
                if let Some(o) = conv_out(n, 2 * s - 1, s, s - 1) {
                    assert_eq!(o, n.div_ceil(s));
                }
            }
        }
    }
}
