//! Per-image convolution kernels built on im2col and GEMM.
//!
//! A convolution of a `[c, h, w]` image with a `kh × kw` window, stride `s`
//! and zero padding `p` is lowered to a `[c·kh·kw, ho·wo]` column matrix.
//! The transposed convolution reuses the same geometry with the roles of the
//! image and the columns swapped.

use super::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// True when the columns matrix is the image itself.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Gathers image patches into `cols` (`rows × cols` row-major).
pub(crate) fn im2col<T: Real>(img: &[T], g: &Window, cols: &mut [T]) {
    let ncols = g.cols();
    debug_assert_eq!(img.len(), g.channels * g.h * g.w);
    debug_assert_eq!(cols.len(), g.rows() * ncols);
    let pad = g.pad as isize;
    for c in 0..g.channels {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back into the image; the adjoint of [`im2col`].
pub(crate) fn col2im<T: Real>(cols: &[T], g: &Window, img: &mut [T]) {
    let ncols = g.cols();
    debug_assert_eq!(img.len(), g.channels * g.h * g.w);
    debug_assert_eq!(cols.len(), g.rows() * ncols);
    let pad = g.pad as isize;
    for c in 0..g.channels {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let col_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, &v) in col_row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] (+)= a[m×k] · b[k×n]`, all row-major.
pub(crate) fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    acc: bool,
) {
    let beta = if acc { T::one() } else { T::zero() };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        k as isize,
        1,
        b,
        n as isize,
        1,
        beta,
        c,
        n as isize,
        1,
    );
}

/// `c[m×n] (+)= aᵀ · b` where `a` is stored `k×m` row-major.
pub(crate) fn matmul_at<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    acc: bool,
) {
    let beta = if acc { T::one() } else { T::zero() };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        1,
        m as isize,
        b,
        n as isize,
        1,
        beta,
        c,
        n as isize,
        1,
    );
}

/// `c[m×n] (+)= a · bᵀ` where `b` is stored `n×k` row-major.
pub(crate) fn matmul_bt<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    acc: bool,
) {
    let beta = if acc { T::one() } else { T::zero() };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        k as isize,
        1,
        b,
        1,
        k as isize,
        beta,
        c,
        n as isize,
        1,
    );
}
