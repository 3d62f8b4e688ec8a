use rayon::prelude::*;

use super::{ConvGeom, ConvParams, Scalar, Shape4, Tensor4};
use crate::error::{Error, Result};

/// Output shape of a convolution, validating channel and group arithmetic.
fn conv_out_shape(input: Shape4, weight: Shape4, geom: ConvGeom) -> Result<Shape4> {
    let k = weight.h;
    let groups = geom.groups;
    if groups == 0 || !input.c.is_multiple_of(groups) {
        return Err(Error::shape(
            "conv2d",
            format!("groups {groups} does not divide input channels {}", input.c),
        ));
    }
    if !weight.n.is_multiple_of(groups) {
        return Err(Error::shape(
            "conv2d",
            format!("groups {groups} does not divide output channels {}", weight.n),
        ));
    }
    if input.c / groups != weight.c {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input channels {} / groups {groups} != weight in-channels {}",
                input.c, weight.c
            ),
        ));
    }
    let oh = geom.out_len(input.h, k).ok_or_else(|| {
        Error::shape(
            "conv2d",
            format!(
                "non-positive output height for h={} k={k} pad={} dilation={}",
                input.h, geom.padding, geom.dilation
            ),
        )
    })?;
    let ow = geom.out_len(input.w, k).ok_or_else(|| {
        Error::shape(
            "conv2d",
            format!(
                "non-positive output width for w={} k={k} pad={} dilation={}",
                input.w, geom.padding, geom.dilation
            ),
        )
    })?;
    Ok(Shape4::new(input.n, weight.n, oh, ow))
}

/// Fill `cols` (`cin_g·k·k` rows × `oh·ow` columns) from one sample/group.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    h: usize,
    w: usize,
    cin_g: usize,
    k: usize,
    geom: ConvGeom,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let pad = geom.padding as isize;
    let plane = oh * ow;
    for c in 0..cin_g {
        let src = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let dy = (ky * geom.dilation) as isize - pad;
                let dx = (kx * geom.dilation) as isize - pad;
                for oy in 0..oh {
                    let iy = (oy * geom.stride) as isize + dy;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * geom.stride) as isize + dx;
                        *o = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add `cols` back into an input-shaped buffer (adjoint of [`im2col`]).
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    h: usize,
    w: usize,
    cin_g: usize,
    k: usize,
    geom: ConvGeom,
    oh: usize,
    ow: usize,
    dx_out: &mut [T],
) {
    let pad = geom.padding as isize;
    let plane = oh * ow;
    for c in 0..cin_g {
        let dst = &mut dx_out[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let dy = (ky * geom.dilation) as isize - pad;
                let dxo = (kx * geom.dilation) as isize - pad;
                for oy in 0..oh {
                    let iy = (oy * geom.stride) as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * geom.stride) as isize + dxo;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(k: usize, geom: ConvGeom) -> bool {
    k == 1 && geom.stride == 1 && geom.padding == 0
}

/// Grouped, dilated 2-D convolution (im2col + GEMM per sample and group).
pub fn conv2d<T: Scalar>(input: &Tensor4<T>, p: &ConvParams<T>) -> Result<Tensor4<T>> {
    conv2d_raw(input, &p.weight, &p.bias, p.geom)
}

pub(crate) fn conv2d_raw<T: Scalar>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: &[T],
    geom: ConvGeom,
) -> Result<Tensor4<T>> {
    let is = input.shape();
    let ws = weight.shape();
    let os = conv_out_shape(is, ws, geom)?;
    if bias.len() != ws.n {
        return Err(Error::shape(
            "conv2d",
            format!("bias length {} != out channels {}", bias.len(), ws.n),
        ));
    }
    let k = ws.h;
    let groups = geom.groups;
    let cin_g = ws.c;
    let cout_g = ws.n / groups;
    let kk = cin_g * k * k;
    let plane = os.plane();
    let in_len = is.c * is.plane();
    let out_len = os.c * plane;
    let pointwise = is_pointwise(k, geom);

    let mut out = vec![T::zero(); os.numel()];
    out.par_chunks_mut(out_len.max(1)).enumerate().for_each(|(n, out_n)| {
        let x_n = &input.data()[n * in_len..(n + 1) * in_len];
        let mut cols = if pointwise {
            Vec::new()
        } else {
            vec![T::zero(); kk * plane]
        };
        for g in 0..groups {
            let x_g = &x_n[g * cin_g * is.plane()..(g + 1) * cin_g * is.plane()];
            let b_mat: &[T] = if pointwise {
                x_g
            } else {
                im2col(x_g, is.h, is.w, cin_g, k, geom, os.h, os.w, &mut cols);
                &cols
            };
            let w_g = &weight.data()[g * cout_g * kk..(g + 1) * cout_g * kk];
            let o_g = &mut out_n[g * cout_g * plane..(g + 1) * cout_g * plane];
            for (o, row) in o_g.chunks_mut(plane).enumerate() {
                row.fill(bias[g * cout_g + o]);
            }
            T::gemm(
                cout_g,
                kk,
                plane,
                T::one(),
                w_g,
                kk as isize,
                1,
                b_mat,
                plane as isize,
                1,
                T::one(),
                o_g,
                plane as isize,
                1,
            );
        }
    });
    Tensor4::from_vec(os, out)
}

/// Gradients of a convolution: `(d_input, d_weight, d_bias)`.
pub(crate) fn conv2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    geom: ConvGeom,
    grad_out: &Tensor4<T>,
) -> (Tensor4<T>, Tensor4<T>, Vec<T>) {
    let is = input.shape();
    let ws = weight.shape();
    let os = grad_out.shape();
    let k = ws.h;
    let groups = geom.groups;
    let cin_g = ws.c;
    let cout_g = ws.n / groups;
    let kk = cin_g * k * k;
    let plane = os.plane();
    let in_len = is.c * is.plane();
    let out_len = os.c * plane;
    let pointwise = is_pointwise(k, geom);

    let mut dx = vec![T::zero(); is.numel()];
    let partial_dw: Vec<Vec<T>> = dx
        .par_chunks_mut(in_len.max(1))
        .enumerate()
        .map(|(n, dx_n)| {
            let x_n = &input.data()[n * in_len..(n + 1) * in_len];
            let dy_n = &grad_out.data()[n * out_len..(n + 1) * out_len];
            let mut dw = vec![T::zero(); ws.numel()];
            let mut cols = vec![T::zero(); if pointwise { 0 } else { kk * plane }];
            let mut dcols = vec![T::zero(); if pointwise { 0 } else { kk * plane }];
            for g in 0..groups {
                let x_g = &x_n[g * cin_g * is.plane()..(g + 1) * cin_g * is.plane()];
                let dy_g = &dy_n[g * cout_g * plane..(g + 1) * cout_g * plane];
                let w_g = &weight.data()[g * cout_g * kk..(g + 1) * cout_g * kk];
                let dw_g = &mut dw[g * cout_g * kk..(g + 1) * cout_g * kk];
                let b_mat: &[T] = if pointwise {
                    x_g
                } else {
                    im2col(x_g, is.h, is.w, cin_g, k, geom, os.h, os.w, &mut cols);
                    &cols
                };
                // dW_g = dY_g · colsᵀ
                T::gemm(
                    cout_g,
                    plane,
                    kk,
                    T::one(),
                    dy_g,
                    plane as isize,
                    1,
                    b_mat,
                    1,
                    plane as isize,
                    T::zero(),
                    dw_g,
                    kk as isize,
                    1,
                );
                let dx_g = &mut dx_n[g * cin_g * is.plane()..(g + 1) * cin_g * is.plane()];
                if pointwise {
                    // dX_g = W_gᵀ · dY_g directly
                    T::gemm(
                        kk,
                        cout_g,
                        plane,
                        T::one(),
                        w_g,
                        1,
                        kk as isize,
                        dy_g,
                        plane as isize,
                        1,
                        T::zero(),
                        dx_g,
                        plane as isize,
                        1,
                    );
                } else {
                    T::gemm(
                        kk,
                        cout_g,
                        plane,
                        T::one(),
                        w_g,
                        1,
                        kk as isize,
                        dy_g,
                        plane as isize,
                        1,
                        T::zero(),
                        &mut dcols,
                        plane as isize,
                        1,
                    );
                    col2im(&dcols, is.h, is.w, cin_g, k, geom, os.h, os.w, dx_g);
                }
            }
            dw
        })
        .collect();

    let mut dw = vec![T::zero(); ws.numel()];
    for part in &partial_dw {
        for (a, &b) in dw.iter_mut().zip(part) {
            *a += b;
        }
    }
    let mut db = vec![T::zero(); os.c];
    for n in 0..os.n {
        for (c, acc) in db.iter_mut().enumerate() {
            let start = (n * os.c + c) * plane;
            *acc += grad_out.data()[start..start + plane].iter().copied().sum::<T>();
        }
    }
    (
        Tensor4::from_vec(is, dx).expect("dx shape"),
        Tensor4::from_vec(ws, dw).expect("dw shape"),
        db,
    )
}

/// 2×2 stride-2 transposed convolution; `weight` is `(in_ch, out_ch, 2, 2)`.
pub fn conv_transpose2x<T: Scalar>(input: &Tensor4<T>, weight: &Tensor4<T>, bias: &[T]) -> Result<Tensor4<T>> {
    let is = input.shape();
    let ws = weight.shape();
    if ws.n != is.c || ws.h != 2 || ws.w != 2 {
        return Err(Error::shape(
            "conv_transpose2x",
            format!("weight {ws} incompatible with input {is}"),
        ));
    }
    if bias.len() != ws.c {
        return Err(Error::shape(
            "conv_transpose2x",
            format!("bias length {} != out channels {}", bias.len(), ws.c),
        ));
    }
    let os = Shape4::new(is.n, ws.c, is.h * 2, is.w * 2);
    let mut out = Tensor4::zeros(os);
    for n in 0..is.n {
        for (o, &b) in bias.iter().enumerate() {
            for y in 0..os.h {
                for x in 0..os.w {
                    let (iy, ix, ky, kx) = (y / 2, x / 2, y % 2, x % 2);
                    let mut acc = b;
                    for c in 0..is.c {
                        acc += input.at(n, c, iy, ix) * weight.at(c, o, ky, kx);
                    }
                    out.set(n, o, y, x, acc);
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn conv_transpose2x_backward<T: Scalar>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    grad_out: &Tensor4<T>,
) -> (Tensor4<T>, Tensor4<T>, Vec<T>) {
    let is = input.shape();
    let ws = weight.shape();
    let os = grad_out.shape();
    let mut dx = Tensor4::zeros(is);
    let mut dw = Tensor4::zeros(ws);
    let mut db = vec![T::zero(); ws.c];
    for n in 0..is.n {
        for (o, dbo) in db.iter_mut().enumerate() {
            for y in 0..os.h {
                for x in 0..os.w {
                    let g = grad_out.at(n, o, y, x);
                    *dbo += g;
                    let (iy, ix, ky, kx) = (y / 2, x / 2, y % 2, x % 2);
                    for c in 0..is.c {
                        let di = dx.index(n, c, iy, ix);
                        dx.data_mut()[di] += g * weight.at(c, o, ky, kx);
                        let wi = dw.index(c, o, ky, kx);
                        dw.data_mut()[wi] += g * input.at(n, c, iy, ix);
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// 2×2 max pooling with stride 2.
pub fn maxpool2x<T: Scalar>(input: &Tensor4<T>) -> Result<Tensor4<T>> {
    maxpool2x_with_argmax(input).map(|(t, _)| t)
}

/// Max pooling that also reports, per output element, the flat input index of
/// the chosen maximum. Ties go to the first element in row-major window order.
pub fn maxpool2x_with_argmax<T: Scalar>(input: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<usize>)> {
    let s = input.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(Error::shape(
            "maxpool2x",
            format!("spatial dims must be even, got {}x{}", s.h, s.w),
        ));
    }
    let os = Shape4::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(os.numel());
    let mut arg = Vec::with_capacity(os.numel());
    let data = input.data();
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for oy in 0..os.h {
            for ox in 0..os.w {
                let mut best = base + (2 * oy) * s.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * s.w + 2 * ox + dx;
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor4::from_vec(os, out)?, arg))
}

/// Nearest-neighbour 2× upsampling: each element becomes a 2×2 block.
pub fn upsample_nearest2x<T: Scalar>(input: &Tensor4<T>) -> Tensor4<T> {
    let s = input.shape();
    let os = Shape4::new(s.n, s.c, s.h * 2, s.w * 2);
    let mut out = Vec::with_capacity(os.numel());
    for plane in input.data().chunks(s.plane()) {
        for y in 0..os.h {
            let row = &plane[(y / 2) * s.w..(y / 2 + 1) * s.w];
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
    }
    Tensor4::from_vec(os, out).expect("upsample shape")
}

/// Concatenate along channels, `a` first.
pub fn concat_channels<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(Error::shape(
            "concat_channels",
            format!("batch/spatial dims differ: {sa} vs {sb}"),
        ));
    }
    let os = Shape4::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let (la, lb) = (sa.c * sa.plane(), sb.c * sb.plane());
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..sa.n {
        out.extend_from_slice(&a.data()[n * la..(n + 1) * la]);
        out.extend_from_slice(&b.data()[n * lb..(n + 1) * lb]);
    }
    Tensor4::from_vec(os, out)
}

/// Channels `[start, start + len)` of every batch item.
pub(crate) fn slice_channels<T: Scalar>(x: &Tensor4<T>, start: usize, len: usize) -> Tensor4<T> {
    let s = x.shape();
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.n * len * plane);
    for n in 0..s.n {
        let from = (n * s.c + start) * plane;
        out.extend_from_slice(&x.data()[from..from + len * plane]);
    }
    Tensor4::from_vec(Shape4::new(s.n, len, s.h, s.w), out).expect("slice shape")
}

/// `out(i, j, y, x) = w[j] · x(i, j, y, x)`.
pub fn channel_scale<T: Scalar>(x: &Tensor4<T>, w: &[T]) -> Result<Tensor4<T>> {
    let s = x.shape();
    if w.len() != s.c {
        return Err(Error::shape(
            "channel_scale",
            format!("{} weights for {} channels", w.len(), s.c),
        ));
    }
    let plane = s.plane();
    let mut out = x.clone();
    for (idx, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let scale = w[idx % s.c];
        for v in chunk {
            *v *= scale;
        }
    }
    Ok(out)
}

pub fn relu<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Batch-norm operating mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Infer,
}

/// Running mean/variance of one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: T,
}

impl<T: Scalar> NormStats<T> {
    pub fn new(channels: usize) -> Self {
        NormStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: T::from_f64(0.1),
        }
    }
}

/// Per-channel batch mean and biased variance.
pub(crate) fn batch_moments<T: Scalar>(x: &Tensor4<T>) -> (Vec<T>, Vec<T>) {
    let s = x.shape();
    let plane = s.plane();
    let count = T::from_f64((s.n * plane) as f64);
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for (c, m) in mean.iter_mut().enumerate() {
        let mut acc = T::zero();
        for n in 0..s.n {
            let start = (n * s.c + c) * plane;
            acc += x.data()[start..start + plane].iter().copied().sum::<T>();
        }
        *m = acc / count;
    }
    for (c, v) in var.iter_mut().enumerate() {
        let mut acc = T::zero();
        for n in 0..s.n {
            let start = (n * s.c + c) * plane;
            for &e in &x.data()[start..start + plane] {
                let d = e - mean[c];
                acc += d * d;
            }
        }
        *v = acc / count;
    }
    (mean, var)
}

pub(crate) fn apply_affine_norm<T: Scalar>(
    x: &Tensor4<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> Tensor4<T> {
    let s = x.shape();
    let plane = s.plane();
    let mut out = x.clone();
    for (idx, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let c = idx % s.c;
        let (m, is, g, b) = (mean[c], inv_std[c], gamma[c], beta[c]);
        for v in chunk {
            *v = g * ((*v - m) * is) + b;
        }
    }
    out
}

/// Batch normalization over `(n, h, w)` per channel.
///
/// In [`BatchNormMode::Train`] the running statistics are updated with the
/// unbiased batch variance, matching the usual momentum convention.
pub fn batch_norm2d<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    state: &mut NormStats<T>,
    eps: T,
    mode: BatchNormMode,
) -> Result<Tensor4<T>> {
    let s = x.shape();
    if gamma.len() != s.c || beta.len() != s.c || state.mean.len() != s.c || state.var.len() != s.c {
        return Err(Error::shape(
            "batch_norm2d",
            format!("parameter vectors must have {} entries", s.c),
        ));
    }
    if eps <= T::zero() {
        return Err(Error::config("batch norm eps must be positive"));
    }
    match mode {
        BatchNormMode::Train => {
            let (mean, var) = batch_moments(x);
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            update_running(state, &mean, &var, s.n * s.plane());
            Ok(apply_affine_norm(x, &mean, &inv_std, gamma, beta))
        }
        BatchNormMode::Infer => {
            let inv_std: Vec<T> = state.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            Ok(apply_affine_norm(x, &state.mean, &inv_std, gamma, beta))
        }
    }
}

pub(crate) fn update_running<T: Scalar>(state: &mut NormStats<T>, mean: &[T], var: &[T], count: usize) {
    let m = state.momentum;
    let correction = if count > 1 {
        T::from_f64(count as f64 / (count - 1) as f64)
    } else {
        T::one()
    };
    for c in 0..mean.len() {
        state.mean[c] = (T::one() - m) * state.mean[c] + m * mean[c];
        state.var[c] = (T::one() - m) * state.var[c] + m * var[c] * correction;
    }
}
