//! Batch normalization over the `N, H, W` axes of an `[N, C, H, W]` tensor.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Running statistics owned by one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

pub struct BatchNormOutput<T> {
    pub output: Tensor<T>,
    /// Normalized input before the affine transform.
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    /// Batch mean and unbiased variance (train mode only).
    pub batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

pub fn batch_norm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &BatchNormState<T>,
    mode: BatchNormMode,
) -> Result<BatchNormOutput<T>> {
    let (n, c, h, w) = input.dims4()?;
    if gamma.len() != c || beta.len() != c || state.running_mean.len() != c {
        return shape_err(format!("batch norm parameters do not match {c} channels"));
    }
    let hw = h * w;
    let count = (n * hw) as f64;
    let x = input.data();
    let (mean, var, stats) = match mode {
        BatchNormMode::Train => {
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    s += x[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                        .iter()
                        .map(|v| v.to_f64().unwrap_or(0.0))
                        .sum::<f64>();
                }
                let m = s / count;
                let mut ss = 0.0;
                for b in 0..n {
                    for v in &x[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                        let d = v.to_f64().unwrap_or(0.0) - m;
                        ss += d * d;
                    }
                }
                mean[ch] = m;
                var[ch] = ss / count;
            }
            let unbiased = var
                .iter()
                .map(|v| if count > 1.0 { v * count / (count - 1.0) } else { *v })
                .collect();
            (mean.clone(), var, Some((mean, unbiased)))
        }
        BatchNormMode::Eval => (
            state.running_mean.data().iter().map(|v| v.to_f64().unwrap_or(0.0)).collect(),
            state.running_var.data().iter().map(|v| v.to_f64().unwrap_or(0.0)).collect(),
            None,
        ),
    };
    let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + state.eps).sqrt())).collect();
    let mut normalized = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let (m, is) = (T::of(mean[ch]), inv_std[ch]);
            let (g, be) = (gamma.data()[ch], beta.data()[ch]);
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                let xh = (x[i] - m) * is;
                normalized[i] = xh;
                out[i] = g * xh + be;
            }
        }
    }
    Ok(BatchNormOutput {
        output: Tensor::new(input.shape(), out)?,
        normalized: Tensor::new(input.shape(), normalized)?,
        inv_std,
        batch_stats: stats,
    })
}

impl<T: Scalar> BatchNormState<T> {
    /// Exponential moving average update with the batch statistics.
    pub fn update(&mut self, mean: &[f64], var: &[f64]) {
        let mom = self.momentum;
        for (r, &m) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = T::of((1.0 - mom) * r.to_f64().unwrap_or(0.0) + mom * m);
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = T::of((1.0 - mom) * r.to_f64().unwrap_or(0.0) + mom * v);
        }
    }
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub fn batch_norm_backward<T: Scalar>(
    normalized: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
    mode: BatchNormMode,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = normalized.dims4()?;
    let hw = h * w;
    let count = T::of((n * hw) as f64);
    let (xh, dy) = (normalized.data(), grad_out.data());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                dgamma[ch] += dy[i] * xh[i];
                dbeta[ch] += dy[i];
            }
        }
    }
    let mut dx = vec![T::zero(); xh.len()];
    for b in 0..n {
        for ch in 0..c {
            let g = gamma.data()[ch];
            let is = inv_std[ch];
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                dx[i] = match mode {
                    BatchNormMode::Train => {
                        g * is * (dy[i] - dbeta[ch] / count - xh[i] * dgamma[ch] / count)
                    }
                    BatchNormMode::Eval => g * is * dy[i],
                };
            }
        }
    }
    Ok((
        Tensor::new(normalized.shape(), dx)?,
        Tensor::new(&[c], dgamma)?,
        Tensor::new(&[c], dbeta)?,
    ))
}
