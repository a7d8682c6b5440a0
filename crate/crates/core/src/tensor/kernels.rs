// Dense kernels shared by the tape ops. All reductions run in a fixed order so
// results do not depend on the thread count.

use rayon::prelude::*;

use super::Real;

const PAR_THRESHOLD: usize = 1 << 18;

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 || m == 0 {
        return;
    }
    let row = |(i, crow): (usize, &mut [T])| {
        let arow = &a[i * k..(i + 1) * k];
        axpy_rows(crow, |p| arow[p], b, k, n);
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `crow += sum_p coef(p) * b[p, :]`, four rows of `b` at a time.
#[inline(always)]
fn axpy_rows<T: Real>(crow: &mut [T], coef: impl Fn(usize) -> T, b: &[T], k: usize, n: usize) {
    let mut p = 0;
    while p + 4 <= k {
        let (a0, a1, a2, a3) = (coef(p), coef(p + 1), coef(p + 2), coef(p + 3));
        let b0 = &b[p * n..(p + 1) * n];
        let b1 = &b[(p + 1) * n..(p + 2) * n];
        let b2 = &b[(p + 2) * n..(p + 3) * n];
        let b3 = &b[(p + 3) * n..(p + 4) * n];
        for j in 0..n {
            crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
        }
        p += 4;
    }
    while p < k {
        let av = coef(p);
        for (cv, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
            *cv += av * bv;
        }
        p += 1;
    }
}

/// `c[m,n] += a[k,m]^T * b[k,n]`
pub(crate) fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 || m == 0 {
        return;
    }
    let row = |(i, crow): (usize, &mut [T])| axpy_rows(crow, |p| a[p * m + i], b, k, n);
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let bt = transpose(n, k, b);
    gemm(m, k, n, a, &bt, c);
}

/// Transpose a `rows x cols` matrix.
pub(crate) fn transpose<T: Real>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Geometry of a 2D convolution over NHWC tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }
}

/// Unfold one NHWC image into `[out_h*out_w, kh*kw*cin]` patches.
pub(crate) fn im2col<T: Real>(g: &ConvGeom, img: &[T]) -> Vec<T> {
    let (oh, ow, patch) = (g.out_h(), g.out_w(), g.patch());
    let mut cols = vec![T::zero(); oh * ow * patch];
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * patch;
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    let dst = base + (ky * g.kw + kx) * g.cin;
                    cols[dst..dst + g.cin].copy_from_slice(&img[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

/// Scatter-add patch gradients back onto one NHWC image.
pub(crate) fn col2im<T: Real>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let (oh, ow, patch) = (g.out_h(), g.out_w(), g.patch());
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * patch;
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    let src = base + (ky * g.kw + kx) * g.cin;
                    for c in 0..g.cin {
                        img[dst + c] += cols[src + c];
                    }
                }
            }
        }
    }
}
