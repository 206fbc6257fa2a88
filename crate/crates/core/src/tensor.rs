//! Dense row-major tensors.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} holds {n} elements but buffer has {}",
                data.len()
            ));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        let n: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            debug_assert!(i < d);
            acc * d + i
        })
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: T) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    /// Interprets the tensor as `[N, C, H, W]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => shape_err(format!("expected a 4-d tensor, got shape {:?}", self.shape)),
        }
    }

    /// Interprets the tensor as `[H, W, C]`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => shape_err(format!("expected a 3-d tensor, got shape {:?}", self.shape)),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!("shapes {:?} and {:?} differ", self.shape, other.shape));
        }
        Ok(())
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.to_f64().unwrap_or(f64::NAN))).collect(),
        }
    }

    /// `[N, C, H, W]` to `[N, H, W, C]`.
    pub fn to_channels_last(&self) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        let mut out = vec![T::zero(); self.len()];
        for b in 0..n {
            for ch in 0..c {
                let src = &self.data[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                for (p, &v) in src.iter().enumerate() {
                    out[(b * h * w + p) * c + ch] = v;
                }
            }
        }
        Tensor::new(&[n, h, w, c], out)
    }

    /// `[N, H, W, C]` to `[N, C, H, W]`.
    pub fn to_channels_first(&self) -> Result<Self> {
        let (n, h, w, c) = self.dims4()?;
        let mut out = vec![T::zero(); self.len()];
        for b in 0..n {
            for p in 0..h * w {
                for ch in 0..c {
                    out[(b * c + ch) * h * w + p] = self.data[(b * h * w + p) * c + ch];
                }
            }
        }
        Tensor::new(&[n, c, h, w], out)
    }

    /// Slice of the leading axis.
    pub fn index_first(&self, i: usize) -> Result<Self> {
        let Some((&n, rest)) = self.shape.split_first() else {
            return shape_err("cannot index a 0-d tensor");
        };
        if i >= n {
            return shape_err(format!("index {i} out of range for leading dim {n}"));
        }
        let step: usize = rest.iter().product();
        Tensor::new(rest, self.data[i * step..(i + 1) * step].to_vec())
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let Some(first) = items.first() else {
            return shape_err("cannot stack zero tensors");
        };
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            first.check_same_shape(t)?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(&shape, data)
    }
}
