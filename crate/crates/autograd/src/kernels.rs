//! Dense kernels behind the graph ops. All reductions run in a fixed order,
//! so results do not depend on the rayon pool size.

use rayon::prelude::*;

/// `c = alpha·a·b + beta·c` for row-major operands, with optional transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserted lengths cover every index touched with these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output indices `o` in `[lo, hi)` for which `o·stride + tap − pad` lands
/// inside `0..size`.
fn tap_range(out: usize, stride: usize, tap: usize, pad: usize, size: usize) -> (usize, usize) {
    let lo = if pad > tap {
        (pad - tap).div_ceil(stride)
    } else {
        0
    };
    if size + pad <= tap {
        return (0, 0);
    }
    let hi = ((size - 1 + pad - tap) / stride + 1).min(out);
    (lo.min(hi), hi)
}

/// Kernel taps that read at least one input pixel. Taps that only ever see
/// padding contribute nothing and are left out of the column matrix; for
/// 1×1 inputs that leaves the centre tap alone.
fn active_taps(g: &ConvGeom) -> Vec<(usize, usize)> {
    let mut taps = Vec::with_capacity(g.kh * g.kw);
    for a in 0..g.kh {
        let (ylo, yhi) = tap_range(g.ho, g.stride, a, g.pad, g.h);
        for b in 0..g.kw {
            let (xlo, xhi) = tap_range(g.wo, g.stride, b, g.pad, g.w);
            if ylo < yhi && xlo < xhi {
                taps.push((a, b));
            }
        }
    }
    taps
}

/// Writes image `i` into columns `[i·HoWo, (i+1)·HoWo)` of the batched
/// `[C·T, N·HoWo]` column matrix (`T` active taps). `cols` starts zeroed.
fn im2col(g: &ConvGeom, taps: &[(usize, usize)], i: usize, img: &[f64], cols: &mut [f64]) {
    let hw = g.col_cols();
    let row_len = g.n * hw;
    for ci in 0..g.c {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for (t, &(a, b)) in taps.iter().enumerate() {
            let row = ci * taps.len() + t;
            let out = &mut cols[row * row_len + i * hw..row * row_len + (i + 1) * hw];
            let (ylo, yhi) = tap_range(g.ho, g.stride, a, g.pad, g.h);
            let (xlo, xhi) = tap_range(g.wo, g.stride, b, g.pad, g.w);
            for oy in ylo..yhi {
                let iy = oy * g.stride + a - g.pad;
                let src = &plane[iy * g.w..(iy + 1) * g.w];
                let dst = &mut out[oy * g.wo..(oy + 1) * g.wo];
                if g.stride == 1 {
                    let ix0 = xlo + b - g.pad;
                    dst[xlo..xhi].copy_from_slice(&src[ix0..ix0 + xhi - xlo]);
                } else {
                    for ox in xlo..xhi {
                        dst[ox] = src[ox * g.stride + b - g.pad];
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, taps: &[(usize, usize)], i: usize, cols: &[f64], img: &mut [f64]) {
    let hw = g.col_cols();
    let row_len = g.n * hw;
    for ci in 0..g.c {
        let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for (t, &(a, b)) in taps.iter().enumerate() {
            let row = ci * taps.len() + t;
            let src = &cols[row * row_len + i * hw..row * row_len + (i + 1) * hw];
            let (ylo, yhi) = tap_range(g.ho, g.stride, a, g.pad, g.h);
            let (xlo, xhi) = tap_range(g.wo, g.stride, b, g.pad, g.w);
            for oy in ylo..yhi {
                let iy = oy * g.stride + a - g.pad;
                let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                let s = &src[oy * g.wo..(oy + 1) * g.wo];
                for ox in xlo..xhi {
                    dst[ox * g.stride + b - g.pad] += s[ox];
                }
            }
        }
    }
}

/// `[F, C, kh, kw]` restricted to the active taps, as `[F, C·T]`.
fn compact_kernel(g: &ConvGeom, taps: &[(usize, usize)], k: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(g.f * g.c * taps.len());
    for f in 0..g.f {
        for ci in 0..g.c {
            for &(a, b) in taps {
                out.push(k[((f * g.c + ci) * g.kh + a) * g.kw + b]);
            }
        }
    }
    out
}

/// `[F, N·HW] <-> [N, F, HW]`.
fn to_batch_major(g: &ConvGeom, src: &[f64]) -> Vec<f64> {
    let hw = g.col_cols();
    let mut out = vec![0.0; src.len()];
    for f in 0..g.f {
        for i in 0..g.n {
            out[(i * g.f + f) * hw..(i * g.f + f + 1) * hw]
                .copy_from_slice(&src[f * g.n * hw + i * hw..f * g.n * hw + (i + 1) * hw]);
        }
    }
    out
}

fn to_channel_major(g: &ConvGeom, src: &[f64]) -> Vec<f64> {
    let hw = g.col_cols();
    let mut out = vec![0.0; src.len()];
    for f in 0..g.f {
        for i in 0..g.n {
            out[f * g.n * hw + i * hw..f * g.n * hw + (i + 1) * hw]
                .copy_from_slice(&src[(i * g.f + f) * hw..(i * g.f + f + 1) * hw]);
        }
    }
    out
}

/// Returns `(output, cols)`; `cols` is saved for the backward pass.
pub(crate) fn conv_forward(g: &ConvGeom, x: &[f64], k: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let taps = active_taps(g);
    let img_len = g.c * g.h * g.w;
    let ncols = g.n * g.col_cols();
    let krows = g.c * taps.len();
    let mut cols = vec![0.0; krows * ncols];
    for i in 0..g.n {
        im2col(g, &taps, i, &x[i * img_len..(i + 1) * img_len], &mut cols);
    }
    let kc = compact_kernel(g, &taps, k);
    let mut out = vec![0.0; g.f * ncols];
    gemm(g.f, krows, ncols, &kc, false, &cols, false, 0.0, &mut out);
    (to_batch_major(g, &out), cols)
}

/// Gradients `(dx, dk)` given the upstream gradient `dy`.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    cols: &[f64],
    k: &[f64],
    dy: &[f64],
    want_dx: bool,
) -> (Vec<f64>, Vec<f64>) {
    let taps = active_taps(g);
    let img_len = g.c * g.h * g.w;
    let ncols = g.n * g.col_cols();
    let krows = g.c * taps.len();
    let d = to_channel_major(g, dy);
    let mut dkc = vec![0.0; g.f * krows];
    gemm(g.f, ncols, krows, &d, false, cols, true, 0.0, &mut dkc);
    let mut dk = vec![0.0; g.f * g.c * g.kh * g.kw];
    for f in 0..g.f {
        for ci in 0..g.c {
            for (t, &(a, b)) in taps.iter().enumerate() {
                dk[((f * g.c + ci) * g.kh + a) * g.kw + b] = dkc[(f * g.c + ci) * taps.len() + t];
            }
        }
    }
    let mut dx = Vec::new();
    if want_dx {
        let kc = compact_kernel(g, &taps, k);
        let mut dcols = vec![0.0; krows * ncols];
        gemm(krows, g.f, ncols, &kc, true, &d, false, 0.0, &mut dcols);
        dx = vec![0.0; g.n * img_len];
        dx.par_chunks_mut(img_len.max(1))
            .enumerate()
            .for_each(|(i, img)| col2im(g, &taps, i, &dcols, img));
    }
    (dx, dk)
}

/// Per-channel sums over `(N, H, W)` of an `[N, C, H·W]` buffer.
pub(crate) fn channel_sums(values: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut sums = vec![0.0; c];
    for i in 0..n {
        for (ch, s) in sums.iter_mut().enumerate() {
            let base = (i * c + ch) * hw;
            *s += values[base..base + hw].iter().sum::<f64>();
        }
    }
    sums
}
