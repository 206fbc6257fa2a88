//! Forward and backward kernels for the network operators.

pub mod conv;
pub mod norm;

pub use conv::{conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward, ConvGeometry};
pub use norm::{batch_norm, batch_norm_backward, BatchNormMode, BatchNormOutput, BatchNormState};

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn leaky_relu<T: Scalar>(input: &Tensor<T>, slope: T) -> Tensor<T> {
    input.map(|x| if x >= T::zero() { x } else { slope * x })
}

pub fn leaky_relu_backward<T: Scalar>(input: &Tensor<T>, slope: T, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    input.zip_map(grad_out, |x, g| if x >= T::zero() { g } else { slope * g })
}

/// Softmax over axis 1 of an `[N, C, H, W]` tensor.
pub fn softmax_channels<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if c == 0 {
        return shape_err("softmax over zero channels");
    }
    let hw = h * w;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut mx = T::neg_infinity();
            for ch in 0..c {
                mx = mx.max(x[base + ch * hw + p]);
            }
            let mut sum = T::zero();
            for ch in 0..c {
                let e = (x[base + ch * hw + p] - mx).exp();
                out[base + ch * hw + p] = e;
                sum += e;
            }
            let inv = T::one() / sum;
            for ch in 0..c {
                out[base + ch * hw + p] *= inv;
            }
        }
    }
    Tensor::new(input.shape(), out)
}

/// Gradient of [`softmax_channels`] given its output.
pub fn softmax_channels_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    output.check_same_shape(grad_out)?;
    let (n, c, h, w) = output.dims4()?;
    let hw = h * w;
    let (y, dy) = (output.data(), grad_out.data());
    let mut dx = vec![T::zero(); y.len()];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut dot = T::zero();
            for ch in 0..c {
                dot += y[base + ch * hw + p] * dy[base + ch * hw + p];
            }
            for ch in 0..c {
                let i = base + ch * hw + p;
                dx[i] = y[i] * (dy[i] - dot);
            }
        }
    }
    Tensor::new(output.shape(), dx)
}

/// Concatenates `[N, C_i, H, W]` tensors along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = parts.first() else {
        return shape_err("concat of zero tensors");
    };
    let (n, _, h, w) = first.dims4()?;
    let mut total = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return shape_err(format!("cannot concat {:?} with {:?}", first.shape(), p.shape()));
        }
        total += pc;
    }
    let mut out = Vec::with_capacity(n * total * h * w);
    for b in 0..n {
        for p in parts {
            let step = p.shape()[1] * h * w;
            out.extend_from_slice(&p.data()[b * step..(b + 1) * step]);
        }
    }
    Tensor::new(&[n, total, h, w], out)
}

/// Splits a channel-axis gradient back into the concatenated parts.
pub fn split_channels<T: Scalar>(grad: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, c, h, w) = grad.dims4()?;
    if channels.iter().sum::<usize>() != c {
        return shape_err("channel split does not cover the tensor");
    }
    let mut bufs: Vec<Vec<T>> = channels.iter().map(|&k| Vec::with_capacity(n * k * h * w)).collect();
    for b in 0..n {
        let mut off = b * c * h * w;
        for (buf, &k) in bufs.iter_mut().zip(channels) {
            buf.extend_from_slice(&grad.data()[off..off + k * h * w]);
            off += k * h * w;
        }
    }
    bufs.into_iter()
        .zip(channels)
        .map(|(buf, &k)| Tensor::new(&[n, k, h, w], buf))
        .collect()
}
