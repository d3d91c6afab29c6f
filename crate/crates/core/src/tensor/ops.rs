//! Forward and backward kernels of every differentiable primitive.
//!
//! These are pure functions on tensors; [`super::Tape`] records calls to them
//! and dispatches the backward halves in reverse order.

use super::kernels::{col2im, im2col, matmul, matmul_at, matmul_bt, Window};
use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

fn mismatch(op: &'static str, dim: &'static str, expected: usize, found: usize) -> Error {
    Error::ShapeMismatch {
        op,
        dim,
        expected,
        found,
    }
}

fn check_bias<T: Real>(op: &'static str, bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != channels => Err(mismatch(op, "bias length", channels, b.len())),
        _ => Ok(()),
    }
}

fn add_bias<T: Real>(out: &mut Tensor<T>, bias: Option<&Tensor<T>>) {
    let Some(b) = bias else { return };
    let s = out.shape();
    let plane = s.plane();
    for (chunk_idx, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let bv = b.data()[chunk_idx % s.c];
        chunk.iter_mut().for_each(|v| *v = *v + bv);
    }
}

fn bias_grad<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let s = g.shape();
    let mut db = vec![0.0f64; s.c];
    for n in 0..s.n {
        for (c, acc) in db.iter_mut().enumerate() {
            *acc += g
                .plane(n, c)
                .iter()
                .map(|v| v.to_f64().unwrap_or(f64::NAN))
                .sum::<f64>();
        }
    }
    Tensor::from_f64([1, s.c, 1, 1], &db).expect("bias shape")
}

/// Geometry of a convolution with weight `[cout, cin, kh, kw]`.
pub(crate) fn conv_window(x: Shape, w: Shape, stride: usize, pad: usize) -> Result<Window> {
    const OP: &str = "conv2d";
    if x.c != w.c {
        return Err(mismatch(OP, "input channels", w.c, x.c));
    }
    if stride == 0 {
        return Err(Error::geometry(OP, "stride must be positive"));
    }
    let out = |extent: usize, k: usize, axis: &str| -> Result<usize> {
        let padded = extent + 2 * pad;
        if padded < k {
            return Err(Error::geometry(
                OP,
                format!("{axis}: kernel {k} exceeds padded extent {padded}"),
            ));
        }
        if !(padded - k).is_multiple_of(stride) {
            return Err(Error::geometry(
                OP,
                format!("{axis}: ({extent} + 2*{pad} - {k}) / {stride} is not integral"),
            ));
        }
        Ok((padded - k) / stride + 1)
    };
    let out_h = out(x.h, w.h, "height")?;
    let out_w = out(x.w, w.w, "width")?;
    Ok(Window {
        channels: x.c,
        h: x.h,
        w: x.w,
        kh: w.h,
        kw: w.w,
        stride,
        pad,
        out_h,
        out_w,
    })
}

/// Geometry of a transposed convolution with weight `[cin, cout, kh, kw]`,
/// expressed as the forward convolution it is the adjoint of.
pub(crate) fn conv_transpose_window(
    x: Shape,
    w: Shape,
    stride: usize,
    pad: usize,
) -> Result<Window> {
    const OP: &str = "transposed_conv2d";
    if x.c != w.n {
        return Err(mismatch(OP, "input channels", w.n, x.c));
    }
    if stride == 0 {
        return Err(Error::geometry(OP, "stride must be positive"));
    }
    let out = |extent: usize, k: usize, axis: &str| -> Result<usize> {
        let full = (extent as isize - 1) * stride as isize + k as isize - 2 * pad as isize;
        if extent == 0 || full <= 0 {
            return Err(Error::geometry(
                OP,
                format!("{axis}: computed output extent {full} is not positive"),
            ));
        }
        Ok(full as usize)
    };
    let h = out(x.h, w.h, "height")?;
    let wd = out(x.w, w.w, "width")?;
    Ok(Window {
        channels: w.c,
        h,
        w: wd,
        kh: w.h,
        kw: w.w,
        stride,
        pad,
        out_h: x.h,
        out_w: x.w,
    })
}

/// Cross-correlation of `x [n, cin, h, w]` with `w [cout, cin, kh, kw]`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_window(x.shape(), w.shape(), stride, pad)?;
    let cout = w.shape().n;
    check_bias("conv2d", bias, cout)?;
    let xs = x.shape();
    let mut out = Tensor::zeros([xs.n, cout, g.out_h, g.out_w]);
    let (k, p) = (g.rows(), g.cols());
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for n in 0..xs.n {
        let xn = x.item(n);
        let src = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, &g, &mut cols);
            &cols
        };
        matmul(cout, k, p, w.data(), src, out.item_mut(n), false);
    }
    add_bias(&mut out, bias);
    Ok(out)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> ConvGrads<T> {
    let g = conv_window(x.shape(), w.shape(), stride, pad).expect("recorded geometry");
    let cout = w.shape().n;
    let (k, p) = (g.rows(), g.cols());
    let mut dw = Tensor::zeros(w.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { k * p }];
    let mut dcols = vec![T::zero(); k * p];
    for n in 0..x.shape().n {
        let gn = grad.item(n);
        let xn = x.item(n);
        let src = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, &g, &mut cols);
            &cols
        };
        matmul_bt(cout, p, k, gn, src, dw.data_mut(), true);
        if let Some(dx) = dx.as_mut() {
            matmul_at(k, cout, p, w.data(), gn, &mut dcols, false);
            let dxn = dx.item_mut(n);
            if g.is_pointwise() {
                dxn.copy_from_slice(&dcols);
            } else {
                col2im(&dcols, &g, dxn);
            }
        }
    }
    ConvGrads {
        dx,
        dw,
        db: bias_grad(grad),
    }
}

/// Transposed convolution with weight `[cin, cout, kh, kw]`: the adjoint of
/// [`conv2d`] with the same weight, stride and padding.
pub fn conv_transpose2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_transpose_window(x.shape(), w.shape(), stride, pad)?;
    let (cin, cout) = (w.shape().n, w.shape().c);
    check_bias("transposed_conv2d", bias, cout)?;
    let xs = x.shape();
    let mut out = Tensor::zeros([xs.n, cout, g.h, g.w]);
    let (r, p) = (g.rows(), g.cols());
    let mut cols = vec![T::zero(); r * p];
    for n in 0..xs.n {
        let on = out.item_mut(n);
        if g.is_pointwise() {
            matmul_at(r, cin, p, w.data(), x.item(n), on, false);
        } else {
            matmul_at(r, cin, p, w.data(), x.item(n), &mut cols, false);
            col2im(&cols, &g, on);
        }
    }
    add_bias(&mut out, bias);
    Ok(out)
}

pub(crate) fn conv_transpose2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> ConvGrads<T> {
    let g = conv_transpose_window(x.shape(), w.shape(), stride, pad).expect("recorded geometry");
    let cin = w.shape().n;
    let (r, p) = (g.rows(), g.cols());
    let mut dw = Tensor::zeros(w.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dcols = vec![T::zero(); if g.is_pointwise() { 0 } else { r * p }];
    for n in 0..x.shape().n {
        let gn = grad.item(n);
        let src = if g.is_pointwise() {
            gn
        } else {
            im2col(gn, &g, &mut dcols);
            &dcols
        };
        matmul_bt(cin, p, r, x.item(n), src, dw.data_mut(), true);
        if let Some(dx) = dx.as_mut() {
            matmul(cin, r, p, w.data(), src, dx.item_mut(n), false);
        }
    }
    ConvGrads {
        dx,
        dw,
        db: bias_grad(grad),
    }
}

/// 2×2 max pooling with stride 2. Returns the output and, per output
/// element, the flat input index that won (first maximum in row-major order).
pub fn maxpool2<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let s = x.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(Error::geometry(
            "maxpool2",
            format!("spatial extent {}x{} is not even", s.h, s.w),
        ));
    }
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut out = Tensor::zeros([s.n, s.c, oh, ow]);
    let mut argmax = Vec::with_capacity(out.len());
    let src = x.data();
    let dst = out.data_mut();
    let mut o = 0;
    for plane in 0..s.n * s.c {
        let base = plane * s.h * s.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * s.w + 2 * ox;
                let mut best = top;
                for idx in [top + 1, top + s.w, top + s.w + 1] {
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                dst[o] = src[best];
                argmax.push(best as u32);
                o += 1;
            }
        }
    }
    Ok((out, argmax))
}

pub(crate) fn maxpool2_backward<T: Real>(
    input: Shape,
    argmax: &[u32],
    grad: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad.data()) {
        d[idx as usize] = d[idx as usize] + g;
    }
    dx
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub(crate) fn relu_backward<T: Real>(x: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Concatenates along the channel axis in list order.
pub fn concat_channels<T: Real>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    const OP: &str = "concat_channels";
    let first = inputs
        .first()
        .ok_or_else(|| Error::geometry(OP, "empty input list"))?
        .shape();
    let mut channels = 0;
    for t in inputs {
        let s = t.shape();
        if s.n != first.n {
            return Err(mismatch(OP, "batch", first.n, s.n));
        }
        if s.h != first.h {
            return Err(mismatch(OP, "height", first.h, s.h));
        }
        if s.w != first.w {
            return Err(mismatch(OP, "width", first.w, s.w));
        }
        channels += s.c;
    }
    let mut data = Vec::with_capacity(first.n * channels * first.plane());
    for n in 0..first.n {
        for t in inputs {
            data.extend_from_slice(t.item(n));
        }
    }
    Tensor::from_vec([first.n, channels, first.h, first.w], data)
}

/// Splits a channel-concatenated gradient back into per-input pieces.
pub(crate) fn split_channels<T: Real>(grad: &Tensor<T>, parts: &[Shape]) -> Vec<Tensor<T>> {
    let mut out: Vec<Vec<T>> = parts
        .iter()
        .map(|s| Vec::with_capacity(s.numel()))
        .collect();
    let g = grad.data();
    let mut offset = 0;
    for _ in 0..grad.shape().n {
        for (buf, s) in out.iter_mut().zip(parts) {
            let len = s.item();
            buf.extend_from_slice(&g[offset..offset + len]);
            offset += len;
        }
    }
    out.into_iter()
        .zip(parts)
        .map(|(d, s)| Tensor::from_vec(*s, d).expect("split shape"))
        .collect()
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    Tensor::from_vec(a.shape(), data)
}

pub(crate) fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    for (dim, x, y) in [
        ("batch", sa.n, sb.n),
        ("channels", sa.c, sb.c),
        ("height", sa.h, sb.h),
        ("width", sa.w, sb.w),
    ] {
        if x != y {
            return Err(mismatch(op, dim, x, y));
        }
    }
    Ok(())
}

/// Two-class softmax over the channel axis; channel 0 is background,
/// channel 1 foreground.
pub fn softmax_pair<T: Real>(z: &Tensor<T>) -> Result<Tensor<T>> {
    let s = z.shape();
    if s.c != 2 {
        return Err(mismatch("softmax_pair", "channels", 2, s.c));
    }
    let mut out = Tensor::zeros(s);
    let p = s.plane();
    for n in 0..s.n {
        let zi = z.item(n);
        let oi = out.item_mut(n);
        for j in 0..p {
            let (z0, z1) = (zi[j], zi[p + j]);
            let m = z0.max(z1);
            let e0 = (z0 - m).exp();
            let e1 = (z1 - m).exp();
            let sum = e0 + e1;
            oi[j] = e0 / sum;
            oi[p + j] = e1 / sum;
        }
    }
    Ok(out)
}

pub(crate) fn softmax_pair_backward<T: Real>(probs: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let s = probs.shape();
    let p = s.plane();
    let mut dz = Tensor::zeros(s);
    for n in 0..s.n {
        let pi = probs.item(n);
        let gi = grad.item(n);
        let di = dz.item_mut(n);
        for j in 0..p {
            let (p0, p1) = (pi[j], pi[p + j]);
            let (g0, g1) = (gi[j], gi[p + j]);
            let dot = g0 * p0 + g1 * p1;
            di[j] = p0 * (g0 - dot);
            di[p + j] = p1 * (g1 - dot);
        }
    }
    dz
}

/// Which class fraction weights the foreground term of the balanced loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BetaConvention {
    /// Foreground term weighted by `|Y+| / |Y|`, background by the rest.
    #[default]
    ForegroundFraction,
    /// Foreground term weighted by `|Y-| / |Y|` (majority-class down-weighting).
    BackgroundFraction,
}

/// Per-image `(foreground weight, background weight)` of the balanced loss.
pub(crate) fn balance_weights<T: Real>(
    gt: &Tensor<T>,
    convention: BetaConvention,
) -> Result<Vec<(f64, f64)>> {
    let s = gt.shape();
    let mut weights = Vec::with_capacity(s.n);
    for n in 0..s.n {
        let item = gt.item(n);
        let mut fg = 0usize;
        for (i, &v) in item.iter().enumerate() {
            if v == T::one() {
                fg += 1;
            } else if v != T::zero() {
                return Err(Error::NonBinaryTarget {
                    op: "balanced_bce_loss",
                    index: n * item.len() + i,
                    value: v.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        let beta = fg as f64 / item.len() as f64;
        weights.push(match convention {
            BetaConvention::ForegroundFraction => (beta, 1.0 - beta),
            BetaConvention::BackgroundFraction => (1.0 - beta, beta),
        });
    }
    Ok(weights)
}

pub(crate) fn check_loss_shapes<T: Real>(probs: &Tensor<T>, gt: &Tensor<T>) -> Result<()> {
    const OP: &str = "balanced_bce_loss";
    let (ps, gs) = (probs.shape(), gt.shape());
    if ps.c != 2 {
        return Err(mismatch(OP, "prediction channels", 2, ps.c));
    }
    if gs.c != 1 {
        return Err(mismatch(OP, "ground-truth channels", 1, gs.c));
    }
    for (dim, a, b) in [
        ("batch", ps.n, gs.n),
        ("height", ps.h, gs.h),
        ("width", ps.w, gs.w),
    ] {
        if a != b {
            return Err(mismatch(OP, dim, a, b));
        }
    }
    Ok(())
}

/// Class-balanced cross entropy summed over pixels and batch.
pub fn balanced_bce_loss<T: Real>(
    probs: &Tensor<T>,
    gt: &Tensor<T>,
    convention: BetaConvention,
    eps: f64,
) -> Result<f64> {
    check_loss_shapes(probs, gt)?;
    let weights = balance_weights(gt, convention)?;
    Ok(balanced_bce_value(probs, gt, &weights, eps))
}

/// `ln(max(v, eps))`, keeping NaN as NaN.
fn clamped_ln<T: Real>(v: T, eps: f64) -> f64 {
    let v = v.to_f64().unwrap_or(f64::NAN);
    if v.is_nan() {
        v
    } else {
        v.max(eps).ln()
    }
}

pub(crate) fn balanced_bce_value<T: Real>(
    probs: &Tensor<T>,
    gt: &Tensor<T>,
    weights: &[(f64, f64)],
    eps: f64,
) -> f64 {
    let s = probs.shape();
    let p = s.plane();
    let mut total = 0.0f64;
    for (n, &(w_fg, w_bg)) in weights.iter().enumerate() {
        let pi = probs.item(n);
        let gi = gt.item(n);
        let (mut fg_sum, mut bg_sum) = (0.0f64, 0.0f64);
        for j in 0..p {
            if gi[j] == T::one() {
                fg_sum += clamped_ln(pi[p + j], eps);
            } else {
                bg_sum += clamped_ln(pi[j], eps);
            }
        }
        total -= w_fg * fg_sum + w_bg * bg_sum;
    }
    total
}

pub(crate) fn balanced_bce_backward<T: Real>(
    probs: &Tensor<T>,
    gt: &Tensor<T>,
    weights: &[(f64, f64)],
    eps: f64,
    upstream: f64,
) -> Tensor<T> {
    let s = probs.shape();
    let p = s.plane();
    let mut d = Tensor::zeros(s);
    for (n, &(w_fg, w_bg)) in weights.iter().enumerate() {
        let pi = probs.item(n);
        let gi = gt.item(n);
        let di = d.item_mut(n);
        for j in 0..p {
            let (idx, w) = if gi[j] == T::one() {
                (p + j, w_fg)
            } else {
                (j, w_bg)
            };
            let pv = pi[idx].to_f64().unwrap_or(f64::NAN);
            if pv > eps {
                di[idx] = T::from_f64_lossy(-upstream * w / pv);
            }
        }
    }
    d
}

/// Gradient of the balanced loss with respect to the logits of a
/// `softmax_pair`, `w·(p − y)` per pixel. Unlike chaining the two backward
/// passes it does not vanish when the true-class probability underflows.
pub(crate) fn softmax_bce_backward<T: Real>(
    probs: &Tensor<T>,
    gt: &Tensor<T>,
    weights: &[(f64, f64)],
    upstream: f64,
) -> Tensor<T> {
    let s = probs.shape();
    let p = s.plane();
    let mut d = Tensor::zeros(s);
    for (n, &(w_fg, w_bg)) in weights.iter().enumerate() {
        let pi = probs.item(n);
        let gi = gt.item(n);
        let di = d.item_mut(n);
        for j in 0..p {
            let (truth, other, w) = if gi[j] == T::one() {
                (p + j, j, w_fg)
            } else {
                (j, p + j, w_bg)
            };
            let miss = upstream * w * pi[other].to_f64().unwrap_or(f64::NAN);
            di[truth] = T::from_f64_lossy(-miss);
            di[other] = T::from_f64_lossy(miss);
        }
    }
    d
}
