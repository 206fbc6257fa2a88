//! 2-D convolution and transposed convolution via im2col + GEMM.

use crate::error::{invalid, shape_err, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self { stride, padding, dilation }
    }

    /// "Same" padding for an odd kernel at dilation 1.
    pub const fn same(kernel: usize, stride: usize) -> Self {
        Self { stride, padding: (kernel - 1) / 2, dilation: 1 }
    }

    pub fn output_len(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 || self.dilation == 0 {
            return invalid("stride and dilation must be positive");
        }
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return shape_err(format!("kernel span {span} exceeds padded input {padded}"));
        }
        Ok((padded - span) / self.stride + 1)
    }

    /// Output length of the transposed operator (no output padding).
    pub fn transposed_output_len(&self, input: usize, kernel: usize) -> Result<usize> {
        let full = (input - 1) * self.stride + self.dilation * (kernel - 1) + 1;
        if full <= 2 * self.padding {
            return shape_err("padding removes the whole transposed output");
        }
        Ok(full - 2 * self.padding)
    }
}

/// Spatial layout shared by im2col and col2im: a `[channels, h, w]` image
/// sampled by a `k x k` window into `out_h x out_w` positions.
#[derive(Clone, Copy)]
struct Patches {
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    out_h: usize,
    out_w: usize,
    geo: ConvGeometry,
}

impl Patches {
    fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        let Patches { channels, h, w, k, out_h, out_w, geo } = *self;
        let n_out = out_h * out_w;
        for c in 0..channels {
            let plane = &img[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * n_out..(row + 1) * n_out];
                    for oy in 0..out_h {
                        let iy = (oy * geo.stride + ki * geo.dilation) as isize - geo.padding as isize;
                        let line = &mut dst[oy * out_w..(oy + 1) * out_w];
                        if iy < 0 || iy >= h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let (lo, hi) = self.valid_columns(kj);
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        if lo == hi {
                            continue;
                        }
                        let x0 = lo * geo.stride + kj * geo.dilation - geo.padding;
                        if geo.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                        } else {
                            for (i, d) in line[lo..hi].iter_mut().enumerate() {
                                *d = src[x0 + i * geo.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Output columns `lo..hi` whose input column for kernel column `kj`
    /// falls inside the image.
    fn valid_columns(&self, kj: usize) -> (usize, usize) {
        let (s, off) = (self.geo.stride, kj * self.geo.dilation);
        let lo = self.geo.padding.saturating_sub(off).div_ceil(s).min(self.out_w);
        let reach = self.w + self.geo.padding;
        let hi = if reach <= off { 0 } else { ((reach - off - 1) / s + 1).min(self.out_w) };
        (lo, hi.max(lo))
    }

    fn col2im<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        let Patches { channels, h, w, k, out_h, out_w, geo } = *self;
        let n_out = out_h * out_w;
        for c in 0..channels {
            let plane = &mut img[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * n_out..(row + 1) * n_out];
                    for oy in 0..out_h {
                        let iy = (oy * geo.stride + ki * geo.dilation) as isize - geo.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let (lo, hi) = self.valid_columns(kj);
                        if lo == hi {
                            continue;
                        }
                        let x0 = lo * geo.stride + kj * geo.dilation - geo.padding;
                        let line = &src[oy * out_w + lo..oy * out_w + hi];
                        for (i, &v) in line.iter().enumerate() {
                            dst[x0 + i * geo.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

fn square_kernel(w: &Tensor<impl Scalar>) -> Result<usize> {
    let (_, _, kh, kw) = w.dims4()?;
    if kh != kw {
        return shape_err(format!("only square kernels are supported, got {kh}x{kw}"));
    }
    Ok(kh)
}

fn check_bias<T: Scalar>(bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != channels {
            return shape_err(format!("bias has {} entries, expected {channels}", b.len()));
        }
    }
    Ok(())
}

/// `input [N, Cin, H, W]`, `weight [Cout, Cin, k, k]`, `bias [Cout]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geo: ConvGeometry,
) -> Result<Tensor<T>> {
    let (n, cin, h, w) = input.dims4()?;
    let (cout, wcin, _, _) = weight.dims4()?;
    let k = square_kernel(weight)?;
    if wcin != cin {
        return shape_err(format!("conv2d weight expects {wcin} input channels, input has {cin}"));
    }
    check_bias(bias, cout)?;
    let p = Patches {
        channels: cin,
        h,
        w,
        k,
        out_h: geo.output_len(h, k)?,
        out_w: geo.output_len(w, k)?,
        geo,
    };
    let mut cols = vec![T::zero(); p.rows() * p.cols()];
    let mut out = vec![T::zero(); n * cout * p.cols()];
    for b in 0..n {
        p.im2col(&input.data()[b * cin * h * w..(b + 1) * cin * h * w], &mut cols);
        let dst = &mut out[b * cout * p.cols()..(b + 1) * cout * p.cols()];
        gemm(false, false, cout, p.rows(), p.cols(), weight.data(), &cols, T::zero(), dst);
        if let Some(bias) = bias {
            for (o, &bv) in bias.data().iter().enumerate() {
                dst[o * p.cols()..(o + 1) * p.cols()].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(&[n, cout, p.out_h, p.out_w], out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    geo: ConvGeometry,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let (n, cin, h, w) = input.dims4()?;
    let (cout, _, _, _) = weight.dims4()?;
    let k = square_kernel(weight)?;
    let (_, _, out_h, out_w) = grad_out.dims4()?;
    let p = Patches { channels: cin, h, w, k, out_h, out_w, geo };
    let mut cols = vec![T::zero(); p.rows() * p.cols()];
    let mut dcols = vec![T::zero(); p.rows() * p.cols()];
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); cout];
    let mut dx = if need_input_grad { vec![T::zero(); input.len()] } else { Vec::new() };
    for b in 0..n {
        let dy = &grad_out.data()[b * cout * p.cols()..(b + 1) * cout * p.cols()];
        p.im2col(&input.data()[b * cin * h * w..(b + 1) * cin * h * w], &mut cols);
        // dW += dY . cols^T
        gemm(false, true, cout, p.cols(), p.rows(), dy, &cols, T::one(), &mut dw);
        for (o, acc) in db.iter_mut().enumerate() {
            *acc += dy[o * p.cols()..(o + 1) * p.cols()].iter().copied().sum::<T>();
        }
        if need_input_grad {
            gemm(true, false, p.rows(), cout, p.cols(), weight.data(), dy, T::zero(), &mut dcols);
            p.col2im(&dcols, &mut dx[b * cin * h * w..(b + 1) * cin * h * w]);
        }
    }
    Ok(ConvGrads {
        input: if need_input_grad { Some(Tensor::new(input.shape(), dx)?) } else { None },
        weight: Tensor::new(weight.shape(), dw)?,
        bias: Tensor::new(&[cout], db)?,
    })
}

/// `input [N, Cin, H, W]`, `weight [Cin, Cout, k, k]`, `bias [Cout]`.
///
/// This is the adjoint of [`conv2d`] with respect to its input.
pub fn conv_transpose2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geo: ConvGeometry,
) -> Result<Tensor<T>> {
    let (n, cin, h, w) = input.dims4()?;
    let (wcin, cout, _, _) = weight.dims4()?;
    let k = square_kernel(weight)?;
    if wcin != cin {
        return shape_err(format!(
            "transposed conv weight expects {wcin} input channels, input has {cin}"
        ));
    }
    check_bias(bias, cout)?;
    let oh = geo.transposed_output_len(h, k)?;
    let ow = geo.transposed_output_len(w, k)?;
    // The output image plays the role of the "input" of the adjoint convolution.
    let p = Patches { channels: cout, h: oh, w: ow, k, out_h: h, out_w: w, geo };
    if geo.output_len(oh, k)? != h || geo.output_len(ow, k)? != w {
        return shape_err("transposed convolution geometry is not invertible");
    }
    let mut cols = vec![T::zero(); p.rows() * p.cols()];
    let mut out = vec![T::zero(); n * cout * oh * ow];
    for b in 0..n {
        let x = &input.data()[b * cin * h * w..(b + 1) * cin * h * w];
        gemm(true, false, p.rows(), cin, p.cols(), weight.data(), x, T::zero(), &mut cols);
        let dst = &mut out[b * cout * oh * ow..(b + 1) * cout * oh * ow];
        p.col2im(&cols, dst);
        if let Some(bias) = bias {
            for (o, &bv) in bias.data().iter().enumerate() {
                dst[o * oh * ow..(o + 1) * oh * ow].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(&[n, cout, oh, ow], out)
}

pub fn conv_transpose2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    geo: ConvGeometry,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let (n, cin, h, w) = input.dims4()?;
    let (_, cout, _, _) = weight.dims4()?;
    let k = square_kernel(weight)?;
    let (_, _, oh, ow) = grad_out.dims4()?;
    let p = Patches { channels: cout, h: oh, w: ow, k, out_h: h, out_w: w, geo };
    let mut cols = vec![T::zero(); p.rows() * p.cols()];
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); cout];
    let mut dx = if need_input_grad { vec![T::zero(); input.len()] } else { Vec::new() };
    for b in 0..n {
        let dy = &grad_out.data()[b * cout * oh * ow..(b + 1) * cout * oh * ow];
        for (o, acc) in db.iter_mut().enumerate() {
            *acc += dy[o * oh * ow..(o + 1) * oh * ow].iter().copied().sum::<T>();
        }
        p.im2col(dy, &mut cols);
        let x = &input.data()[b * cin * h * w..(b + 1) * cin * h * w];
        // dW [Cin, Cout*k*k] += x . cols^T
        gemm(false, true, cin, p.cols(), p.rows(), x, &cols, T::one(), &mut dw);
        if need_input_grad {
            let dst = &mut dx[b * cin * h * w..(b + 1) * cin * h * w];
            gemm(false, false, cin, p.rows(), p.cols(), weight.data(), &cols, T::zero(), dst);
        }
    }
    Ok(ConvGrads {
        input: if need_input_grad { Some(Tensor::new(input.shape(), dx)?) } else { None },
        weight: Tensor::new(weight.shape(), dw)?,
        bias: Tensor::new(&[cout], db)?,
    })
}
