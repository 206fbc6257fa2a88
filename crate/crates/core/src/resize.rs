//! Bilinear resampling with half-pixel centers (`align_corners = false`).
//!
//! Output pixel `i` samples the source at `(i + 0.5) * in / out - 0.5`,
//! clamped to the valid range, so identity sizes return the input unchanged.

use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap { lo, hi, frac: src - lo as f64 }
        })
        .collect()
}

/// Resizes a `[H, W, C]` tensor to `[height, width, C]`.
pub fn resize_bilinear<T: Scalar>(image: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let (h, w, c) = image.dims3()?;
    if h == 0 || w == 0 || height == 0 || width == 0 {
        return invalid(format!("cannot resize {h}x{w} to {height}x{width}"));
    }
    if (h, w) == (height, width) {
        return Ok(image.clone());
    }
    let (ty, tx) = (taps(h, height), taps(w, width));
    let src = image.data();
    let mut out = Vec::with_capacity(height * width * c);
    for ry in &ty {
        for rx in &tx {
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch].to_f64().unwrap_or(0.0);
                let top = at(ry.lo, rx.lo) * (1.0 - rx.frac) + at(ry.lo, rx.hi) * rx.frac;
                let bottom = at(ry.hi, rx.lo) * (1.0 - rx.frac) + at(ry.hi, rx.hi) * rx.frac;
                out.push(T::of(top * (1.0 - ry.frac) + bottom * ry.frac));
            }
        }
    }
    Tensor::new(&[height, width, c], out)
}
