//! Forward and backward kernels for the differentiable primitives.
//!
//! Shape rules:
//! - `conv2d`: input `[N, C, H, W]`, kernel `[O, C, K, K]`, optional bias `[O]`,
//!   output `[N, O, (H + 2p - K)/s + 1, (W + 2p - K)/s + 1]`; zero padding.
//! - `dense`: input `[N, I]`, weight `[O, I]`, optional bias `[O]`, output `[N, O]`.
//! - `max_pool`: input `[N, C, H, W]`, square window `k`, stride `s`, no padding.
//! - `softmax`: normalizes along the last axis.
//! - elementwise ops require identical shapes; the only broadcast is bias-add
//!   inside `conv2d` and `dense`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl Conv2dGeometry {
    pub fn infer(
        input: &[usize],
        kernel: &[usize],
        bias: Option<&[usize]>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::InvalidShape(format!(
                "conv2d input must be NCHW, got {input:?}"
            )));
        }
        if kernel.len() != 4 || kernel[2] != kernel[3] {
            return Err(Error::InvalidShape(format!(
                "conv2d kernel must be [O, C, K, K], got {kernel:?}"
            )));
        }
        if kernel[1] != input[1] {
            return Err(Error::shape(
                "conv2d input channels",
                &[input[0], kernel[1], input[2], input[3]],
                input,
            ));
        }
        if let Some(b) = bias {
            if b != [kernel[0]] {
                return Err(Error::shape("conv2d bias", &[kernel[0]], b));
            }
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let k = kernel[2];
        let (h, w) = (input[2], input[3]);
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel {k} larger than padded input {h}x{w} (padding {padding})"
            )));
        }
        Ok(Conv2dGeometry {
            batch: input[0],
            in_channels: input[1],
            out_channels: kernel[0],
            height: h,
            width: w,
            kernel: k,
            stride,
            padding,
            out_height: (h + 2 * padding - k) / stride + 1,
            out_width: (w + 2 * padding - k) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_height, self.out_width]
    }

    /// Output positions `o` for which `o * stride + offset - padding` lands
    /// inside `[0, input_len)`.
    fn valid(&self, offset: usize, input_len: usize, output_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = offset as isize - self.padding as isize;
        // o * s + shift >= 0
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        // o * s + shift <= input_len - 1
        let top = input_len as isize - 1 - shift;
        let hi = if top < 0 { 0 } else { top / s + 1 };
        let lo = lo.max(0) as usize;
        let hi = (hi as usize).min(output_len);
        (lo, hi.max(lo))
    }
}

pub fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = Conv2dGeometry::infer(
        input.shape(),
        kernel.shape(),
        bias.map(|b| b.shape()),
        stride,
        padding,
    )?;
    let (x, w) = (input.data(), kernel.data());
    let (plane_in, plane_out) = (g.height * g.width, g.out_height * g.out_width);
    let mut out = vec![0.0; g.batch * g.out_channels * plane_out];
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            let out_plane =
                &mut out[(n * g.out_channels + o) * plane_out..][..plane_out];
            if let Some(b) = bias {
                out_plane.fill(b.data()[o]);
            }
            for c in 0..g.in_channels {
                let in_plane = &x[(n * g.in_channels + c) * plane_in..][..plane_in];
                for ky in 0..g.kernel {
                    let (oy_lo, oy_hi) = g.valid(ky, g.height, g.out_height);
                    for kx in 0..g.kernel {
                        let (ox_lo, ox_hi) = g.valid(kx, g.width, g.out_width);
                        let wv = w[((o * g.in_channels + c) * g.kernel + ky) * g.kernel + kx];
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.padding;
                            let row_in = &in_plane[iy * g.width..][..g.width];
                            let row_out = &mut out_plane[oy * g.out_width..][..g.out_width];
                            for ox in ox_lo..ox_hi {
                                row_out[ox] += wv * row_in[ox * g.stride + kx - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(g.output_shape().to_vec(), out))
}

pub fn conv2d_backward_input(upstream: &Tensor, kernel: &Tensor, g: &Conv2dGeometry) -> Tensor {
    let (dy, w) = (upstream.data(), kernel.data());
    let (plane_in, plane_out) = (g.height * g.width, g.out_height * g.out_width);
    let mut dx = vec![0.0; g.batch * g.in_channels * plane_in];
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            let dy_plane = &dy[(n * g.out_channels + o) * plane_out..][..plane_out];
            for c in 0..g.in_channels {
                let dx_plane = &mut dx[(n * g.in_channels + c) * plane_in..][..plane_in];
                for ky in 0..g.kernel {
                    let (oy_lo, oy_hi) = g.valid(ky, g.height, g.out_height);
                    for kx in 0..g.kernel {
                        let (ox_lo, ox_hi) = g.valid(kx, g.width, g.out_width);
                        let wv = w[((o * g.in_channels + c) * g.kernel + ky) * g.kernel + kx];
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.padding;
                            let row_dy = &dy_plane[oy * g.out_width..][..g.out_width];
                            let row_dx = &mut dx_plane[iy * g.width..][..g.width];
                            for ox in ox_lo..ox_hi {
                                row_dx[ox * g.stride + kx - g.padding] += wv * row_dy[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![g.batch, g.in_channels, g.height, g.width], dx)
}

pub fn conv2d_backward_kernel(upstream: &Tensor, input: &Tensor, g: &Conv2dGeometry) -> Tensor {
    let (dy, x) = (upstream.data(), input.data());
    let (plane_in, plane_out) = (g.height * g.width, g.out_height * g.out_width);
    let mut dw = vec![0.0; g.out_channels * g.in_channels * g.kernel * g.kernel];
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            let dy_plane = &dy[(n * g.out_channels + o) * plane_out..][..plane_out];
            for c in 0..g.in_channels {
                let in_plane = &x[(n * g.in_channels + c) * plane_in..][..plane_in];
                for ky in 0..g.kernel {
                    let (oy_lo, oy_hi) = g.valid(ky, g.height, g.out_height);
                    for kx in 0..g.kernel {
                        let (ox_lo, ox_hi) = g.valid(kx, g.width, g.out_width);
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.padding;
                            let row_dy = &dy_plane[oy * g.out_width..][..g.out_width];
                            let row_in = &in_plane[iy * g.width..][..g.width];
                            for ox in ox_lo..ox_hi {
                                acc += row_dy[ox] * row_in[ox * g.stride + kx - g.padding];
                            }
                        }
                        dw[((o * g.in_channels + c) * g.kernel + ky) * g.kernel + kx] += acc;
                    }
                }
            }
        }
    }
    Tensor::from_parts(
        vec![g.out_channels, g.in_channels, g.kernel, g.kernel],
        dw,
    )
}

/// Gradient of a bias broadcast over every axis except `axis`.
pub fn bias_backward(upstream: &Tensor, axis: usize) -> Tensor {
    let shape = upstream.shape();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut db = vec![0.0; extent];
    for (chunk_index, chunk) in upstream.data().chunks(inner).enumerate() {
        db[chunk_index % extent] += chunk.iter().sum::<f64>();
    }
    Tensor::from_parts(vec![extent], db)
}

pub(crate) fn dense_check(
    input: &[usize],
    weight: &[usize],
    bias: Option<&[usize]>,
) -> Result<(usize, usize, usize)> {
    if input.len() != 2 || weight.len() != 2 {
        return Err(Error::InvalidShape(format!(
            "dense expects input [N, I] and weight [O, I], got {input:?} and {weight:?}"
        )));
    }
    if input[1] != weight[1] {
        return Err(Error::shape("dense input features", &[input[0], weight[1]], input));
    }
    if let Some(b) = bias {
        if b != [weight[0]] {
            return Err(Error::shape("dense bias", &[weight[0]], b));
        }
    }
    Ok((input[0], weight[1], weight[0]))
}

pub fn dense_forward(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, i, o) = dense_check(input.shape(), weight.shape(), bias.map(|b| b.shape()))?;
    let mut out = vec![0.0; n * o];
    for b in 0..n {
        let x = &input.data()[b * i..][..i];
        for j in 0..o {
            let w = &weight.data()[j * i..][..i];
            let dot: f64 = x.iter().zip(w).map(|(a, c)| a * c).sum();
            out[b * o + j] = dot + bias.map_or(0.0, |bias| bias.data()[j]);
        }
    }
    Ok(Tensor::from_parts(vec![n, o], out))
}

pub fn dense_backward_input(upstream: &Tensor, weight: &Tensor) -> Tensor {
    let (n, o) = (upstream.shape()[0], upstream.shape()[1]);
    let i = weight.shape()[1];
    let mut dx = vec![0.0; n * i];
    for b in 0..n {
        let row = &mut dx[b * i..][..i];
        for j in 0..o {
            let g = upstream.data()[b * o + j];
            for (d, w) in row.iter_mut().zip(&weight.data()[j * i..][..i]) {
                *d += g * w;
            }
        }
    }
    Tensor::from_parts(vec![n, i], dx)
}

pub fn dense_backward_weight(upstream: &Tensor, input: &Tensor) -> Tensor {
    let (n, o) = (upstream.shape()[0], upstream.shape()[1]);
    let i = input.shape()[1];
    let mut dw = vec![0.0; o * i];
    for b in 0..n {
        let x = &input.data()[b * i..][..i];
        for j in 0..o {
            let g = upstream.data()[b * o + j];
            for (d, xv) in dw[j * i..][..i].iter_mut().zip(x) {
                *d += g * xv;
            }
        }
    }
    Tensor::from_parts(vec![o, i], dw)
}

/// Max pooling; returns the pooled tensor and, per output element, the flat
/// input offset of the selected maximum (first one on ties).
pub fn max_pool_forward(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(Error::InvalidShape(format!(
            "max_pool input must be NCHW, got {shape:?}"
        )));
    }
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "max_pool window and stride must be >= 1".into(),
        ));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if h < window || w < window {
        return Err(Error::InvalidArgument(format!(
            "max_pool window {window} larger than input {h}x{w}"
        )));
    }
    let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = base + oy * stride * w + ox * stride;
                for ky in 0..window {
                    for kx in 0..window {
                        let at = base + (oy * stride + ky) * w + ox * stride + kx;
                        let v = input.data()[at];
                        if v > best {
                            best = v;
                            best_at = at;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_at);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, oh, ow], out), argmax))
}

pub fn max_pool_backward(upstream: &Tensor, argmax: &[usize], input_shape: &[usize]) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    for (&at, &g) in argmax.iter().zip(upstream.data()) {
        dx.data_mut()[at] += g;
    }
    dx
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn softmax_forward(input: &Tensor) -> Tensor {
    let last = *input.shape().last().expect("rank >= 1");
    let mut out = input.data().to_vec();
    for row in out.chunks_mut(last) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::from_parts(input.shape().to_vec(), out)
}

pub fn softmax_backward(upstream: &Tensor, output: &Tensor) -> Tensor {
    let last = *output.shape().last().expect("rank >= 1");
    let mut dx = vec![0.0; output.numel()];
    for ((dx_row, y), g) in dx
        .chunks_mut(last)
        .zip(output.data().chunks(last))
        .zip(upstream.data().chunks(last))
    {
        let inner: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
        for ((d, &yi), &gi) in dx_row.iter_mut().zip(y).zip(g) {
            *d = yi * (gi - inner);
        }
    }
    Tensor::from_parts(output.shape().to_vec(), dx)
}

/// Concatenates NCHW tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let s = first.shape();
    if s.len() != 4 {
        return Err(Error::InvalidShape(format!("concat expects NCHW, got {s:?}")));
    }
    for p in parts {
        let ps = p.shape();
        if ps.len() != 4 || ps[0] != s[0] || ps[2] != s[2] || ps[3] != s[3] {
            return Err(Error::shape("concat_channels", s, ps));
        }
    }
    let plane = s[2] * s[3];
    let channels: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = Vec::with_capacity(s[0] * channels * plane);
    for n in 0..s[0] {
        for p in parts {
            let c = p.shape()[1];
            out.extend_from_slice(&p.data()[n * c * plane..][..c * plane]);
        }
    }
    Ok(Tensor::from_parts(vec![s[0], channels, s[2], s[3]], out))
}

/// Splits an upstream gradient of a channel concat back into its parts.
pub fn split_channels(upstream: &Tensor, channels: &[usize]) -> Vec<Tensor> {
    let s = upstream.shape();
    let plane = s[2] * s[3];
    let total = s[1];
    let mut out: Vec<Vec<f64>> = channels
        .iter()
        .map(|c| Vec::with_capacity(s[0] * c * plane))
        .collect();
    for n in 0..s[0] {
        let mut start = n * total * plane;
        for (buf, &c) in out.iter_mut().zip(channels) {
            buf.extend_from_slice(&upstream.data()[start..start + c * plane]);
            start += c * plane;
        }
    }
    out.into_iter()
        .zip(channels)
        .map(|(data, &c)| Tensor::from_parts(vec![s[0], c, s[2], s[3]], data))
        .collect()
}
