//! Forward and reverse-mode kernels used by the segmenter.
//!
//! Rasters are `(channels, height, width)` tensors. Convolutions use "same"
//! zero padding and run as direct, register-blocked loops over a padded copy
//! of the input; the padded copy is kept for the backward pass.

use crate::error::{Error, Result};
use crate::mask::ClassMask;
use crate::tensor::{Real, Tensor};

const LANES: usize = 16;
const OUT_BLOCK: usize = 4;

/// Zero-padded copy of a raster. Rows are widened to a whole number of
/// `LANES` chunks so vector loads never leave the buffer.
#[derive(Clone, Debug)]
pub struct PaddedInput<T> {
    data: Vec<T>,
    channels: usize,
    height: usize,
    width: usize,
    row_stride: usize,
    plane_stride: usize,
}

impl<T: Real> PaddedInput<T> {
    fn new(src: &[T], channels: usize, height: usize, width: usize, pad: usize) -> Self {
        let row_stride = width.div_ceil(LANES) * LANES + 2 * pad;
        let plane_stride = (height + 2 * pad) * row_stride;
        let mut data = vec![T::zero(); channels * plane_stride];
        for c in 0..channels {
            for y in 0..height {
                let at = c * plane_stride + (y + pad) * row_stride + pad;
                let from = (c * height + y) * width;
                data[at..at + width].copy_from_slice(&src[from..from + width]);
            }
        }
        PaddedInput {
            data,
            channels,
            height,
            width,
            row_stride,
            plane_stride,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

}

/// Output of a convolution forward pass together with its padded input.
pub struct ConvForward<T> {
    pub output: Tensor<T>,
    pub input: PaddedInput<T>,
}

/// Gradients of a convolution with respect to its three inputs.
#[derive(Debug, Clone)]
pub struct ConvGrads<T: Real> {
    pub input: Tensor<T>,
    pub kernels: Tensor<T>,
    pub bias: Vec<T>,
}

fn conv_dims<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias_len: usize,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (cin, h, w) = input.dims3()?;
    let &[cout, kcin, kh, kw] = kernels.shape() else {
        return Err(Error::Shape(format!(
            "kernels must be (out, in, k, k), got {:?}",
            kernels.shape()
        )));
    };
    if kh != kw || kh % 2 == 0 {
        return Err(Error::Shape(format!(
            "kernel spatial extent must be square and odd, got {kh}x{kw}"
        )));
    }
    if kcin != cin {
        return Err(Error::Shape(format!(
            "kernels expect {kcin} input channels but the input has {cin}"
        )));
    }
    if bias_len != cout {
        return Err(Error::Shape(format!(
            "bias has {bias_len} entries for {cout} output channels"
        )));
    }
    Ok((cin, h, w, cout, kh))
}

/// `out[o] = bias[o] + Σ_c Σ_tap taps[(c, tap), o] · shift(input[c], tap)` for
/// output channels `o0..o0 + B`. `taps` is laid out `[c][ky][kx][o]` and
/// `offsets` holds the matching buffer offset of each `(c, ky, kx)`.
#[allow(clippy::too_many_arguments)]
#[inline(never)]
fn correlate_block<T: Real, const B: usize>(
    data: &[T],
    row_stride: usize,
    (h, w): (usize, usize),
    offsets: &[usize],
    taps: &[T],
    (cout, o0): (usize, usize),
    bias: &[T],
    out: &mut [T],
) {
    let hw = h * w;
    for y in 0..h {
        for x0 in (0..w).step_by(LANES) {
            let base = y * row_stride + x0;
            let mut acc = [[T::zero(); LANES]; B];
            for (b, a) in acc.iter_mut().enumerate() {
                *a = [bias[o0 + b]; LANES];
            }
            // a single flat loop keeps the accumulators in vector registers
            for (t, &off) in offsets.iter().enumerate() {
                let v: &[T; LANES] = data[base + off..base + off + LANES].try_into().unwrap();
                let wk: &[T; B] = taps[t * cout + o0..t * cout + o0 + B].try_into().unwrap();
                for b in 0..B {
                    for l in 0..LANES {
                        acc[b][l] = T::fmadd(wk[b], v[l], acc[b][l]);
                    }
                }
            }
            let n = LANES.min(w - x0);
            for (b, a) in acc.iter().enumerate() {
                let at = (o0 + b) * hw + y * w + x0;
                out[at..at + n].copy_from_slice(&a[..n]);
            }
        }
    }
}

fn correlate<T: Real>(input: &PaddedInput<T>, taps: &[T], cout: usize, k: usize, bias: &[T]) -> Vec<T> {
    let (cin, h, w) = input.dims();
    let mut offsets = Vec::with_capacity(cin * k * k);
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                offsets.push(c * input.plane_stride + ky * input.row_stride + kx);
            }
        }
    }
    let (data, rs) = (&input.data[..], input.row_stride);
    let mut out = vec![T::zero(); cout * h * w];
    let mut o0 = 0;
    while o0 + OUT_BLOCK <= cout {
        correlate_block::<T, OUT_BLOCK>(data, rs, (h, w), &offsets, taps, (cout, o0), bias, &mut out);
        o0 += OUT_BLOCK;
    }
    while o0 < cout {
        correlate_block::<T, 1>(data, rs, (h, w), &offsets, taps, (cout, o0), bias, &mut out);
        o0 += 1;
    }
    out
}

/// Kernels `(out, in, k, k)` rearranged to `[in][ky][kx][out]`, optionally
/// with input and output roles swapped and taps flipped (the adjoint).
fn arrange_taps<T: Real>(kernels: &[T], cout: usize, cin: usize, k: usize, adjoint: bool) -> Vec<T> {
    let kk = k * k;
    let mut taps = vec![T::zero(); kernels.len()];
    for o in 0..cout {
        for c in 0..cin {
            for t in 0..kk {
                let v = kernels[(o * cin + c) * kk + t];
                if adjoint {
                    taps[(o * kk + (kk - 1 - t)) * cin + c] = v;
                } else {
                    taps[(c * kk + t) * cout + o] = v;
                }
            }
        }
    }
    taps
}

/// Convolution with zero "same" padding, keeping the padded input for backward.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &[T],
) -> Result<ConvForward<T>> {
    let (cin, h, w, cout, k) = conv_dims(input, kernels, bias.len())?;
    let padded = PaddedInput::new(input.data(), cin, h, w, k / 2);
    let taps = arrange_taps(kernels.data(), cout, cin, k, false);
    let out = correlate(&padded, &taps, cout, k, bias);
    Ok(ConvForward {
        output: Tensor::from_vec(&[cout, h, w], out)?,
        input: padded,
    })
}

pub fn conv2d<T: Real>(input: &Tensor<T>, kernels: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    Ok(conv2d_forward(input, kernels, bias)?.output)
}

/// `Σ_p <plane[in_p..in_p + LANES], gplanes[b][g_p..g_p + LANES]>` for each `b`.
#[inline(never)]
fn shifted_dots<T: Real, const B: usize>(
    plane: &[T],
    gplanes: &[&[T]; B],
    positions: &[(usize, usize)],
) -> [T; B] {
    let mut acc = [[T::zero(); LANES]; B];
    for &(at, gat) in positions {
        let v: &[T; LANES] = plane[at..at + LANES].try_into().unwrap();
        for b in 0..B {
            let g: &[T; LANES] = gplanes[b][gat..gat + LANES].try_into().unwrap();
            for l in 0..LANES {
                acc[b][l] = T::fmadd(g[l], v[l], acc[b][l]);
            }
        }
    }
    acc.map(|a| a.iter().fold(T::zero(), |s, &v| s + v))
}

/// `grad_kernels[o, c, ky, kx] += Σ_{y,x} gout[o, y, x] · input[c, y+ky-p, x+kx-p]`
/// for output channels `o0..o0 + B`.
fn kernel_grad_block<T: Real, const B: usize>(
    input: &PaddedInput<T>,
    gout: &PaddedInput<T>,
    o0: usize,
    k: usize,
    grad_kernels: &mut [T],
) {
    let (cin, h, _) = input.dims();
    let chunks = gout.row_stride / LANES;
    let positions: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..chunks).map(move |ch| (y, ch * LANES)))
        .map(|(y, x0)| (y * input.row_stride + x0, y * gout.row_stride + x0))
        .collect();
    let gplanes: [&[T]; B] = std::array::from_fn(|b| {
        let at = (o0 + b) * gout.plane_stride;
        &gout.data[at..at + gout.plane_stride]
    });
    for c in 0..cin {
        let plane = &input.data[c * input.plane_stride..(c + 1) * input.plane_stride];
        for ky in 0..k {
            for kx in 0..k {
                let shift = ky * input.row_stride + kx;
                let acc = shifted_dots(&plane[shift..], &gplanes, &positions);
                for (b, v) in acc.into_iter().enumerate() {
                    let slot = &mut grad_kernels[((o0 + b) * cin + c) * k * k + ky * k + kx];
                    *slot = *slot + v;
                }
            }
        }
    }
}

/// Accumulates kernel and bias gradients into `grad_kernels` / `grad_bias`
/// and returns the input gradient when `want_input` is set.
pub fn conv2d_backward_accumulate<T: Real>(
    input: &PaddedInput<T>,
    kernels: &Tensor<T>,
    grad_output: &Tensor<T>,
    grad_kernels: &mut [T],
    grad_bias: &mut [T],
    want_input: bool,
) -> Result<Option<Tensor<T>>> {
    let (cin, h, w) = input.dims();
    let &[cout, kcin, k, _] = kernels.shape() else {
        return Err(Error::Shape("kernels must be rank 4".into()));
    };
    let (gc, gh, gw) = grad_output.dims3()?;
    if (gc, gh, gw) != (cout, h, w) || kcin != cin {
        return Err(Error::Shape(format!(
            "output gradient {:?} does not match convolution output ({cout}, {h}, {w})",
            grad_output.shape()
        )));
    }
    if grad_kernels.len() != kernels.len() || grad_bias.len() != cout {
        return Err(Error::Shape("gradient buffers do not match the kernels".into()));
    }
    let hw = h * w;
    let gout = grad_output.data();
    for (o, gb) in grad_bias.iter_mut().enumerate() {
        *gb = gout[o * hw..(o + 1) * hw].iter().fold(*gb, |acc, &v| acc + v);
    }
    let unpadded = PaddedInput::new(gout, cout, h, w, 0);
    let mut o0 = 0;
    while o0 + OUT_BLOCK <= cout {
        kernel_grad_block::<T, OUT_BLOCK>(input, &unpadded, o0, k, grad_kernels);
        o0 += OUT_BLOCK;
    }
    while o0 < cout {
        kernel_grad_block::<T, 1>(input, &unpadded, o0, k, grad_kernels);
        o0 += 1;
    }
    if !want_input {
        return Ok(None);
    }
    let padded = PaddedInput::new(gout, cout, h, w, k / 2);
    let taps = arrange_taps(kernels.data(), cout, cin, k, true);
    let zero = vec![T::zero(); cin];
    let grad_in = correlate(&padded, &taps, cin, k, &zero);
    Ok(Some(Tensor::from_vec(&[cin, h, w], grad_in)?))
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_output: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let cout = kernels.shape().first().copied().unwrap_or(0);
    let (cin, h, w, _, k) = conv_dims(input, kernels, cout)?;
    let padded = PaddedInput::new(input.data(), cin, h, w, k / 2);
    let mut gk = vec![T::zero(); kernels.len()];
    let mut gb = vec![T::zero(); cout];
    let gi = conv2d_backward_accumulate(&padded, kernels, grad_output, &mut gk, &mut gb, true)?
        .expect("input gradient requested");
    Ok(ConvGrads {
        input: gi,
        kernels: Tensor::from_vec(kernels.shape(), gk)?,
        bias: gb,
    })
}

pub fn relu_in_place<T: Real>(t: &mut Tensor<T>) {
    for v in t.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

pub fn relu<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let mut out = t.clone();
    relu_in_place(&mut out);
    out
}

/// Masks `grad` by the positive support of a ReLU output.
pub fn relu_backward_in_place<T: Real>(output: &Tensor<T>, grad: &mut Tensor<T>) {
    for (g, &o) in grad.data_mut().iter_mut().zip(output.data()) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2×2 max pooling with stride 2. Returns the pooled tensor and, per output
/// value, the flat index of the selected input element (first maximum wins).
pub fn max_pool2<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (c, h, w) = input.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "max pooling needs even spatial extents, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let candidates = [
                    base + 2 * y * w + 2 * x,
                    base + 2 * y * w + 2 * x + 1,
                    base + (2 * y + 1) * w + 2 * x,
                    base + (2 * y + 1) * w + 2 * x + 1,
                ];
                let mut best = candidates[0];
                for &i in &candidates[1..] {
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                out.push(src[best]);
                idx.push(best as u32);
            }
        }
    }
    Ok((Tensor::from_vec(&[c, oh, ow], out)?, idx))
}

pub fn max_pool2_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[u32],
    grad_output: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_output.len() {
        return Err(Error::Shape(
            "pooling indices do not match the output gradient".into(),
        ));
    }
    let mut grad = Tensor::zeros(input_shape);
    let g = grad.data_mut();
    for (&i, &v) in argmax.iter().zip(grad_output.data()) {
        g[i as usize] = g[i as usize] + v;
    }
    Ok(grad)
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = input.dims3()?;
    let (oh, ow) = (2 * h, 2 * w);
    let src = input.data();
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            let srow = &src[ch * h * w + (y / 2) * w..ch * h * w + (y / 2 + 1) * w];
            let drow = &mut out[ch * oh * ow + y * ow..ch * oh * ow + (y + 1) * ow];
            for (x, d) in drow.iter_mut().enumerate() {
                *d = srow[x / 2];
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

pub fn upsample2_backward<T: Real>(grad_output: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, oh, ow) = grad_output.dims3()?;
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(Error::Shape(format!(
            "upsampling gradient must have even extents, got {oh}x{ow}"
        )));
    }
    let (h, w) = (oh / 2, ow / 2);
    let g = grad_output.data();
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let o = ch * h * w + (y / 2) * w + x / 2;
                out[o] = out[o] + g[ch * oh * ow + y * ow + x];
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

/// Channel concatenation `[a; b]`.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ca, ha, wa) = a.dims3()?;
    let (cb, hb, wb) = b.dims3()?;
    if (ha, wa) != (hb, wb) {
        return Err(Error::Shape(format!(
            "cannot concatenate {ha}x{wa} with {hb}x{wb}"
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&[ca + cb, ha, wa], data)
}

/// Splits a concatenated gradient back into its `first_channels` head and the rest.
pub fn split_channels<T: Real>(
    grad: &Tensor<T>,
    first_channels: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, h, w) = grad.dims3()?;
    if first_channels > c {
        return Err(Error::Shape(format!(
            "cannot split {first_channels} channels from {c}"
        )));
    }
    let cut = first_channels * h * w;
    Ok((
        Tensor::from_vec(&[first_channels, h, w], grad.data()[..cut].to_vec())?,
        Tensor::from_vec(&[c - first_channels, h, w], grad.data()[cut..].to_vec())?,
    ))
}

/// Per-pixel softmax over the channel axis.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = logits.dims3()?;
    let hw = h * w;
    let z = logits.data();
    let mut out = vec![T::zero(); c * hw];
    let mut buf = vec![0.0f64; c];
    for p in 0..hw {
        let mut max = f64::NEG_INFINITY;
        for k in 0..c {
            buf[k] = z[k * hw + p].to_f64_lossy();
            max = max.max(buf[k]);
        }
        let mut sum = 0.0;
        for b in buf.iter_mut() {
            *b = (*b - max).exp();
            sum += *b;
        }
        for k in 0..c {
            out[k * hw + p] = T::from_f64_lossy(buf[k] / sum);
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

/// Mean per-pixel cross-entropy of `logits` against `target` and its
/// gradient with respect to the logits, `(softmax − one_hot) / pixels`.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    target: &ClassMask,
) -> Result<(f64, Tensor<T>)> {
    let (c, h, w) = logits.dims3()?;
    if target.dims() != (h, w) {
        return Err(Error::Shape(format!(
            "target mask is {:?} but logits are {h}x{w}",
            target.dims()
        )));
    }
    let hw = h * w;
    let z = logits.data();
    let mut grad = vec![T::zero(); c * hw];
    let mut buf = vec![0.0f64; c];
    let mut loss = 0.0f64;
    let inv = 1.0 / hw as f64;
    for (p, &t) in target.data().iter().enumerate() {
        let t = t as usize;
        if t >= c {
            return Err(Error::Data(format!(
                "target class {t} at pixel {p} is outside [0, {c})"
            )));
        }
        let mut max = f64::NEG_INFINITY;
        for k in 0..c {
            buf[k] = z[k * hw + p].to_f64_lossy();
            max = max.max(buf[k]);
        }
        let mut sum = 0.0;
        for k in 0..c {
            sum += (buf[k] - max).exp();
        }
        let log_sum = sum.ln();
        loss -= buf[t] - max - log_sum;
        for k in 0..c {
            let prob = (buf[k] - max - log_sum).exp();
            let onehot = if k == t { 1.0 } else { 0.0 };
            grad[k * hw + p] = T::from_f64_lossy((prob - onehot) * inv);
        }
    }
    let loss = loss * inv;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }
    Ok((loss.max(0.0), Tensor::from_vec(&[c, h, w], grad)?))
}

/// Per-pixel argmax over channels; ties resolve to the lowest class index.
pub fn argmax_classes<T: Real>(scores: &Tensor<T>) -> Result<ClassMask> {
    let (c, h, w) = scores.dims3()?;
    let hw = h * w;
    let s = scores.data();
    let mut out = vec![0u8; hw];
    for (p, o) in out.iter_mut().enumerate() {
        let mut best = 0;
        for k in 1..c {
            if s[k * hw + p] > s[best * hw + p] {
                best = k;
            }
        }
        *o = best as u8;
    }
    ClassMask::from_vec(h, w, out)
}
