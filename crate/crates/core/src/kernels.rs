//! Forward and backward kernels on single samples.
//!
//! Every kernel is a pure function. Feature maps are `[C, H, W]`; vectors are
//! 1-d. Backward functions take the upstream gradient of the forward output
//! and return gradients with the shapes of the corresponding forward inputs.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Output extent of a sliding window.
pub fn window_output(extent: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn conv_geom<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(ConvGeom, usize)> {
    input.expect_ndim("conv2d", 3)?;
    weight.expect_ndim("conv2d", 4)?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (o, wc, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if wc != c {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight {:?} expects {wc} input channels but input {:?} has {c}",
                weight.shape(),
                input.shape()
            ),
        ));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
    }
    let (Some(oh), Some(ow)) = (
        window_output(h, kh, stride, pad),
        window_output(w, kw, stride, pad),
    ) else {
        return Err(Error::shape(
            "conv2d",
            format!(
                "kernel {kh}x{kw} with pad {pad} does not fit input {:?}",
                input.shape()
            ),
        ));
    };
    Ok((
        ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        },
        o,
    ))
}

/// Unfolds input windows into a `[C*kh*kw, oh*ow]` matrix.
fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let cols_n = g.oh * g.ow;
    let mut cols = vec![T::zero(); g.c * g.kh * g.kw * cols_n];
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    let out_row = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                    for (oj, slot) in out_row.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            *slot = src[jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds a `[C*kh*kw, oh*ow]` matrix back onto the input, summing overlaps.
fn col2im<T: Element>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let cols_n = g.oh * g.ow;
    let mut x = vec![T::zero(); g.c * g.h * g.w];
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..g.ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[jj as usize] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2-d cross-correlation without bias: `[C,H,W] * [O,C,kh,kw] -> [O,H',W']`.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (g, o) = conv_geom(input, weight, stride, pad)?;
    let k = g.c * g.kh * g.kw;
    let n = g.oh * g.ow;
    let mut out = vec![T::zero(); o * n];
    if g.pointwise() {
        T::gemm(o, k, n, T::one(), weight.data(), false, input.data(), false, T::zero(), &mut out);
    } else {
        let cols = im2col(input.data(), &g);
        T::gemm(o, k, n, T::one(), weight.data(), false, &cols, false, T::zero(), &mut out);
    }
    Tensor::new(vec![o, g.oh, g.ow], out)
}

/// Gradients of [`conv2d`]: `(d_input, d_weight)`. `d_input` is skipped when
/// `need_input` is false.
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
    need_input: bool,
    need_weight: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (g, o) = conv_geom(input, weight, stride, pad)?;
    if grad_out.shape() != [o, g.oh, g.ow] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("gradient {:?} vs output [{o}, {}, {}]", grad_out.shape(), g.oh, g.ow),
        ));
    }
    let k = g.c * g.kh * g.kw;
    let n = g.oh * g.ow;
    let cols_owned;
    let cols: &[T] = if g.pointwise() {
        input.data()
    } else {
        cols_owned = im2col(input.data(), &g);
        &cols_owned
    };
    let d_weight = if need_weight {
        let mut dw = vec![T::zero(); o * k];
        T::gemm(o, n, k, T::one(), grad_out.data(), false, cols, true, T::zero(), &mut dw);
        Some(Tensor::new(weight.shape().to_vec(), dw)?)
    } else {
        None
    };
    let d_input = if need_input {
        let mut dcols = vec![T::zero(); k * n];
        T::gemm(k, o, n, T::one(), weight.data(), true, grad_out.data(), false, T::zero(), &mut dcols);
        let dx = if g.pointwise() { dcols } else { col2im(&dcols, &g) };
        Some(Tensor::new(input.shape().to_vec(), dx)?)
    } else {
        None
    };
    Ok((d_input, d_weight))
}

pub fn relu<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

pub fn relu_backward<T: Element>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("relu gradient shape")
}

/// Max pooling over `window x window` patches. Padded positions never win.
/// Returns the pooled map and, per output element, the flat input index
/// that produced it (first maximum in row-major window order).
pub fn max_pool2d<T: Element>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    input.expect_ndim("max_pool2d", 3)?;
    if pad >= window {
        return Err(Error::InvalidArgument(format!(
            "max_pool2d pad {pad} must be smaller than window {window}"
        )));
    }
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (Some(oh), Some(ow)) = (
        window_output(h, window, stride, pad),
        window_output(w, window, stride, pad),
    ) else {
        return Err(Error::shape(
            "max_pool2d",
            format!("window {window} does not fit input {:?}", input.shape()),
        ));
    };
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for ki in 0..window {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for kj in 0..window {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let idx = (ci * h + ii as usize) * w + jj as usize;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, arg))
}

pub fn max_pool2d_backward<T: Element>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    dx
}

/// Global max pooling of `[N,H,W]` to `[N]`, with the `(h, w)` of each
/// channel's maximum. Ties resolve to the smallest row-major index.
pub fn global_max_pool<T: Element>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<(usize, usize)>)> {
    input.expect_ndim("global_max_pool", 3)?;
    let (n, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let hw = h * w;
    let mut values = Vec::with_capacity(n);
    let mut locs = Vec::with_capacity(n);
    for plane in input.data().chunks_exact(hw) {
        let mut best = 0;
        for (i, &v) in plane.iter().enumerate() {
            if v > plane[best] {
                best = i;
            }
        }
        values.push(plane[best]);
        locs.push((best / w, best % w));
    }
    Ok((Tensor::new(vec![n], values)?, locs))
}

pub fn global_max_pool_backward<T: Element>(
    input_shape: &[usize],
    argmax: &[(usize, usize)],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let (h, w) = (input_shape[1], input_shape[2]);
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (ch, (&(i, j), &g)) in argmax.iter().zip(grad_out.data()).enumerate() {
        d[(ch * h + i) * w + j] += g;
    }
    dx
}

pub fn global_avg_pool<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    input.expect_ndim("global_avg_pool", 3)?;
    let (n, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let scale = T::one() / T::from_f64((h * w) as f64);
    let values = input
        .data()
        .chunks_exact(h * w)
        .map(|plane| plane.iter().copied().sum::<T>() * scale)
        .collect();
    Tensor::new(vec![n], values)
}

pub fn global_avg_pool_backward<T: Element>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let hw = input_shape[1] * input_shape[2];
    let scale = T::one() / T::from_f64(hw as f64);
    let mut dx = Tensor::zeros(input_shape);
    for (plane, &g) in dx.data_mut().chunks_exact_mut(hw).zip(grad_out.data()) {
        plane.fill(g * scale);
    }
    dx
}

/// Averages each consecutive group of `k` entries: `[k*M] -> [M]`.
pub fn cross_channel_avg_pool<T: Element>(input: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    input.expect_ndim("cross_channel_avg_pool", 1)?;
    if k == 0 || input.numel() % k != 0 {
        return Err(Error::shape(
            "cross_channel_avg_pool",
            format!("length {} is not divisible by group size {k}", input.numel()),
        ));
    }
    let scale = T::one() / T::from_f64(k as f64);
    let values = input
        .data()
        .chunks_exact(k)
        .map(|g| g.iter().copied().sum::<T>() * scale)
        .collect();
    Tensor::new(vec![input.numel() / k], values)
}

pub fn cross_channel_avg_pool_backward<T: Element>(k: usize, grad_out: &Tensor<T>) -> Tensor<T> {
    let scale = T::one() / T::from_f64(k as f64);
    let data = grad_out
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat(g * scale).take(k))
        .collect();
    Tensor::new(vec![grad_out.numel() * k], data).expect("pooled gradient shape")
}

/// Affine map `weight * input + bias` with `weight: [O, D]`.
pub fn fully_connected<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    input.expect_ndim("fully_connected", 1)?;
    weight.expect_ndim("fully_connected", 2)?;
    let (o, d) = (weight.shape()[0], weight.shape()[1]);
    if d != input.numel() || bias.shape() != [o] {
        return Err(Error::shape(
            "fully_connected",
            format!(
                "input {:?}, weight {:?}, bias {:?}",
                input.shape(),
                weight.shape(),
                bias.shape()
            ),
        ));
    }
    let mut out = bias.data().to_vec();
    T::gemm(o, d, 1, T::one(), weight.data(), false, input.data(), false, T::one(), &mut out);
    Tensor::new(vec![o], out)
}

/// Gradients of [`fully_connected`]: `(d_input, d_weight, d_bias)`.
pub fn fully_connected_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (o, d) = (weight.shape()[0], weight.shape()[1]);
    let mut dx = vec![T::zero(); d];
    T::gemm(d, o, 1, T::one(), weight.data(), true, grad_out.data(), false, T::zero(), &mut dx);
    let mut dw = vec![T::zero(); o * d];
    T::gemm(o, 1, d, T::one(), grad_out.data(), false, input.data(), false, T::zero(), &mut dw);
    (
        Tensor::new(vec![d], dx).expect("fc input gradient"),
        Tensor::new(vec![o, d], dw).expect("fc weight gradient"),
        grad_out.clone(),
    )
}

/// Numerically stable softmax.
pub fn softmax<T: Element>(logits: &Tensor<T>) -> Tensor<T> {
    let max = logits
        .data()
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let exps: Vec<T> = logits.data().iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Tensor::new(logits.shape().to_vec(), exps.into_iter().map(|e| e / total).collect())
        .expect("softmax shape")
}

/// `-log softmax(logits)[label]` and the softmax probabilities.
pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, label: usize) -> Result<(T, Tensor<T>)> {
    logits.expect_ndim("softmax_cross_entropy", 1)?;
    let m = logits.numel();
    if label >= m {
        return Err(Error::LabelOutOfRange { label, classes: m });
    }
    let z = logits.data();
    let max = z.iter().copied().fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let log_total = z.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    let loss = log_total - (z[label] - max);
    Ok((loss, softmax(logits)))
}

/// Gradient of the cross-entropy with respect to the logits, scaled by the
/// upstream scalar gradient.
pub fn softmax_cross_entropy_backward<T: Element>(probs: &Tensor<T>, label: usize, grad: T) -> Tensor<T> {
    let mut d = probs.clone();
    d.data_mut()[label] -= T::one();
    d.scale_assign(grad);
    d
}
