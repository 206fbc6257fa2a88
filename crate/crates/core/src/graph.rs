//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`Graph::backward`] walks it in reverse.

use crate::error::{invalid, shape_err, Result};
use crate::grid::{kernels, GridSpec, NEIGHBORS};
use crate::ops::{self, BatchNormMode, BatchNormState, ConvGeometry};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geo: ConvGeometry },
    ConvTranspose2d { input: Var, weight: Var, bias: Option<Var>, geo: ConvGeometry },
    LeakyRelu { input: Var, slope: T },
    SoftmaxChannels { input: Var },
    BatchNorm { input: Var, gamma: Var, beta: Var, mode: BatchNormMode, normalized: Tensor<T>, inv_std: Vec<T> },
    ConcatChannels { inputs: Vec<Var>, channels: Vec<usize> },
    /// Zeroes off-grid channels of `[N, 9, H, W]` probabilities and renormalizes.
    MaskRenormalize { input: Var, grid: GridSpec },
    ChannelsLast { input: Var },
    /// `q [N, H, W, 9]`, `features [N, H, W, C]` to centers `[N, h, w, C]`.
    Centers { q: Var, features: Var, grid: GridSpec, mass: Vec<T> },
    /// `q [N, H, W, 9]`, `cells [N, h, w, C]` to pixels `[N, H, W, C]`.
    Reconstruct { q: Var, cells: Var, grid: GridSpec },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale { input: Var, factor: T },
    AddScalar { input: Var, value: T },
    Ln { input: Var },
    /// Euclidean norm over the last axis.
    NormLastAxis { input: Var },
    SmoothL1 { input: Var },
    SumAll { input: Var },
}

impl<T> Op<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::SoftmaxChannels { .. } => "softmax_channels",
            Op::BatchNorm { .. } => "batch_norm",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::MaskRenormalize { .. } => "mask_renormalize",
            Op::ChannelsLast { .. } => "channels_last",
            Op::Centers { .. } => "centers",
            Op::Reconstruct { .. } => "reconstruct",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Ln { .. } => "ln",
            Op::NormLastAxis { .. } => "norm_last_axis",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::SumAll { .. } => "sum_all",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, weight, bias, .. } | Op::ConvTranspose2d { input, weight, bias, .. } => {
                let mut v = vec![*input, *weight];
                v.extend(*bias);
                v
            }
            Op::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::ConcatChannels { inputs, .. } => inputs.clone(),
            Op::Centers { q, features, .. } => vec![*q, *features],
            Op::Reconstruct { q, cells, .. } => vec![*q, *cells],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::LeakyRelu { input, .. }
            | Op::SoftmaxChannels { input }
            | Op::MaskRenormalize { input, .. }
            | Op::ChannelsLast { input }
            | Op::Scale { input, .. }
            | Op::AddScalar { input, .. }
            | Op::Ln { input }
            | Op::NormLastAxis { input }
            | Op::SmoothL1 { input }
            | Op::SumAll { input } => vec![*input],
        }
    }
}

#[derive(Debug)]
pub struct ComputationNode<T> {
    pub op: Op<T>,
    pub value: Tensor<T>,
    pub requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<ComputationNode<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// The gradient of `v`, or zeros if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &ComputationNode<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(ComputationNode { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(ComputationNode { op: Op::Leaf, value, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked (parameters, differentiated inputs).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(ComputationNode { op: Op::Leaf, value, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geo: ConvGeometry) -> Result<Var> {
        let out = ops::conv2d(self.value(input), self.value(weight), bias.map(|b| self.value(b)), geo)?;
        Ok(self.push(Op::Conv2d { input, weight, bias, geo }, out))
    }

    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geo: ConvGeometry) -> Result<Var> {
        let out = ops::conv_transpose2d(self.value(input), self.value(weight), bias.map(|b| self.value(b)), geo)?;
        Ok(self.push(Op::ConvTranspose2d { input, weight, bias, geo }, out))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: T) -> Var {
        let out = ops::leaky_relu(self.value(input), slope);
        self.push(Op::LeakyRelu { input, slope }, out)
    }

    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let out = ops::softmax_channels(self.value(input))?;
        Ok(self.push(Op::SoftmaxChannels { input }, out))
    }

    /// Returns the output and, in train mode, the batch mean and unbiased
    /// variance for the caller to fold into the running statistics.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState<T>,
        mode: BatchNormMode,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let r = ops::batch_norm(self.value(input), self.value(gamma), self.value(beta), state, mode)?;
        let v = self.push(
            Op::BatchNorm { input, gamma, beta, mode, normalized: r.normalized, inv_std: r.inv_std },
            r.output,
        );
        Ok((v, r.batch_stats))
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let parts: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_channels(&parts)?;
        let channels = parts.iter().map(|p| p.shape()[1]).collect();
        Ok(self.push(Op::ConcatChannels { inputs: inputs.to_vec(), channels }, out))
    }

    pub fn mask_renormalize(&mut self, input: Var, grid: GridSpec) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        if c != NEIGHBORS || (h, w) != (grid.height, grid.width) {
            return shape_err(format!("mask expects [N, 9, {}, {}], got {:?}", grid.height, grid.width, x.shape()));
        }
        let mut out = x.data().to_vec();
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let p = y * w + xx;
                    let mut total = T::zero();
                    for k in 0..NEIGHBORS {
                        let i = (b * NEIGHBORS + k) * h * w + p;
                        if grid.neighbor(xx, y, k).is_none() {
                            out[i] = T::zero();
                        }
                        total += out[i];
                    }
                    for k in 0..NEIGHBORS {
                        out[(b * NEIGHBORS + k) * h * w + p] /= total;
                    }
                }
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        Ok(self.push(Op::MaskRenormalize { input, grid }, out))
    }

    pub fn channels_last(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).to_channels_last()?;
        Ok(self.push(Op::ChannelsLast { input }, out))
    }

    pub fn centers(&mut self, q: Var, features: Var, grid: GridSpec) -> Result<Var> {
        let (n, c) = check_assoc_pair(self.value(q), self.value(features), &grid, (grid.height, grid.width))?;
        let (qd, fd) = (self.value(q).data(), self.value(features).data());
        let (np, nc) = (grid.n_pixels(), grid.n_cells());
        let mut out = Vec::with_capacity(n * nc * c);
        let mut mass = Vec::with_capacity(n * nc);
        for b in 0..n {
            let (u, m) = kernels::centers_forward(
                &grid,
                &qd[b * np * NEIGHBORS..(b + 1) * np * NEIGHBORS],
                &fd[b * np * c..(b + 1) * np * c],
                c,
            );
            out.extend(u);
            mass.extend(m);
        }
        let out = Tensor::new(&[n, grid.grid_h, grid.grid_w, c], out)?;
        Ok(self.push(Op::Centers { q, features, grid, mass }, out))
    }

    pub fn reconstruct(&mut self, q: Var, cells: Var, grid: GridSpec) -> Result<Var> {
        let (n, c) = check_assoc_pair(self.value(q), self.value(cells), &grid, (grid.grid_h, grid.grid_w))?;
        let (qd, ud) = (self.value(q).data(), self.value(cells).data());
        let (np, nc) = (grid.n_pixels(), grid.n_cells());
        let mut out = Vec::with_capacity(n * np * c);
        for b in 0..n {
            out.extend(kernels::reconstruct_forward(
                &grid,
                &qd[b * np * NEIGHBORS..(b + 1) * np * NEIGHBORS],
                &ud[b * nc * c..(b + 1) * nc * c],
                c,
            ));
        }
        let out = Tensor::new(&[n, grid.height, grid.width, c], out)?;
        Ok(self.push(Op::Reconstruct { q, cells, grid }, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let out = self.value(input).map(|x| x * factor);
        self.push(Op::Scale { input, factor }, out)
    }

    pub fn add_scalar(&mut self, input: Var, value: T) -> Var {
        let out = self.value(input).map(|x| x + value);
        self.push(Op::AddScalar { input, value }, out)
    }

    pub fn ln(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|x| x.ln());
        self.push(Op::Ln { input }, out)
    }

    pub fn norm_last_axis(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let Some((&c, lead)) = x.shape().split_last() else {
            return shape_err("norm of a 0-d tensor");
        };
        let out: Vec<T> = x.data().chunks(c.max(1)).map(|v| v.iter().map(|&e| e * e).sum::<T>().sqrt()).collect();
        let shape = if lead.is_empty() { vec![1] } else { lead.to_vec() };
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(Op::NormLastAxis { input }, out))
    }

    pub fn smooth_l1(&mut self, input: Var) -> Var {
        let out = self.value(input).map(smooth_l1);
        self.push(Op::SmoothL1 { input }, out)
    }

    pub fn sum_all(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().copied().sum::<T>();
        self.push(Op::SumAll { input }, Tensor::scalar(s))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return invalid(format!("loss must be a scalar, got shape {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, dx) in self.local_grads(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&dx)?,
                    slot @ None => *slot = Some(dx),
                }
            }
        }
        // only leaves keep their gradient
        for (i, slot) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                *slot = None;
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, node: &ComputationNode<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geo } => {
                let r = ops::conv2d_backward(self.value(*input), self.value(*weight), *geo, g, self.wants(*input))?;
                if let Some(dx) = r.input {
                    out.push((*input, dx));
                }
                out.push((*weight, r.weight));
                if let Some(b) = bias {
                    out.push((*b, r.bias));
                }
            }
            Op::ConvTranspose2d { input, weight, bias, geo } => {
                let r = ops::conv_transpose2d_backward(self.value(*input), self.value(*weight), *geo, g, self.wants(*input))?;
                if let Some(dx) = r.input {
                    out.push((*input, dx));
                }
                out.push((*weight, r.weight));
                if let Some(b) = bias {
                    out.push((*b, r.bias));
                }
            }
            Op::LeakyRelu { input, slope } => {
                out.push((*input, ops::leaky_relu_backward(self.value(*input), *slope, g)?));
            }
            Op::SoftmaxChannels { input } => {
                out.push((*input, ops::softmax_channels_backward(&node.value, g)?));
            }
            Op::BatchNorm { input, gamma, beta, mode, normalized, inv_std } => {
                let (dx, dg, db) = ops::batch_norm_backward(normalized, inv_std, self.value(*gamma), *mode, g)?;
                out.push((*input, dx));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            Op::ConcatChannels { inputs, channels } => {
                for (v, part) in inputs.iter().zip(ops::split_channels(g, channels)?) {
                    out.push((*v, part));
                }
            }
            Op::MaskRenormalize { input, grid } => {
                // y_k = v_k x_k / Z: dx_k = v_k / Z (dy_k - <dy, y>)
                let x = self.value(*input);
                let (n, _, h, w) = x.dims4()?;
                let (y, dy) = (node.value.data(), g.data());
                let mut dx = vec![T::zero(); x.len()];
                for b in 0..n {
                    for yy in 0..h {
                        for xx in 0..w {
                            let p = yy * w + xx;
                            let idx = |k: usize| (b * NEIGHBORS + k) * h * w + p;
                            let mut z = T::zero();
                            let mut dot = T::zero();
                            for k in 0..NEIGHBORS {
                                if grid.neighbor(xx, yy, k).is_some() {
                                    z += x.data()[idx(k)];
                                }
                                dot += dy[idx(k)] * y[idx(k)];
                            }
                            for k in 0..NEIGHBORS {
                                if grid.neighbor(xx, yy, k).is_some() {
                                    dx[idx(k)] = (dy[idx(k)] - dot) / z;
                                }
                            }
                        }
                    }
                }
                out.push((*input, Tensor::new(x.shape(), dx)?));
            }
            Op::ChannelsLast { input } => {
                out.push((*input, g.to_channels_first()?));
            }
            Op::Centers { q, features, grid, mass } => {
                let (qv, fv) = (self.value(*q), self.value(*features));
                let n = qv.shape()[0];
                let c = fv.shape()[3];
                let (np, nc) = (grid.n_pixels(), grid.n_cells());
                let mut dq = vec![T::zero(); qv.len()];
                let mut df = vec![T::zero(); fv.len()];
                for b in 0..n {
                    kernels::centers_backward(
                        grid,
                        &qv.data()[b * np * NEIGHBORS..(b + 1) * np * NEIGHBORS],
                        c,
                        &fv.data()[b * np * c..(b + 1) * np * c],
                        &node.value.data()[b * nc * c..(b + 1) * nc * c],
                        &mass[b * nc..(b + 1) * nc],
                        &g.data()[b * nc * c..(b + 1) * nc * c],
                        &mut dq[b * np * NEIGHBORS..(b + 1) * np * NEIGHBORS],
                        &mut df[b * np * c..(b + 1) * np * c],
                    );
                }
                out.push((*q, Tensor::new(qv.shape(), dq)?));
                out.push((*features, Tensor::new(fv.shape(), df)?));
            }
            Op::Reconstruct { q, cells, grid } => {
                let (qv, uv) = (self.value(*q), self.value(*cells));
                let n = qv.shape()[0];
                let c = uv.shape()[3];
                let (np, nc) = (grid.n_pixels(), grid.n_cells());
                let mut dq = vec![T::zero(); qv.len()];
                let mut du = vec![T::zero(); uv.len()];
                for b in 0..n {
                    kernels::reconstruct_backward(
                        grid,
                        &qv.data()[b * np * NEIGHBORS..(b + 1) * np * NEIGHBORS],
                        &uv.data()[b * nc * c..(b + 1) * nc * c],
                        c,
                        &g.data()[b * np * c..(b + 1) * np * c],
                        &mut dq[b * np * NEIGHBORS..(b + 1) * np * NEIGHBORS],
                        &mut du[b * nc * c..(b + 1) * nc * c],
                    );
                }
                out.push((*q, Tensor::new(qv.shape(), dq)?));
                out.push((*cells, Tensor::new(uv.shape(), du)?));
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|x| -x)));
            }
            Op::Mul(a, b) => {
                out.push((*a, g.zip_map(self.value(*b), |d, y| d * y)?));
                out.push((*b, g.zip_map(self.value(*a), |d, x| d * x)?));
            }
            Op::Scale { input, factor } => {
                out.push((*input, g.map(|d| d * *factor)));
            }
            Op::AddScalar { input, .. } => {
                out.push((*input, g.clone()));
            }
            Op::Ln { input } => {
                out.push((*input, g.zip_map(self.value(*input), |d, x| d / x)?));
            }
            Op::NormLastAxis { input } => {
                let x = self.value(*input);
                let c = *x.shape().last().unwrap_or(&1);
                let mut dx = vec![T::zero(); x.len()];
                for (i, (chunk, dst)) in x.data().chunks(c).zip(dx.chunks_mut(c)).enumerate() {
                    let nrm = node.value.data()[i];
                    if nrm > T::zero() {
                        let s = g.data()[i] / nrm;
                        for (d, &v) in dst.iter_mut().zip(chunk) {
                            *d = s * v;
                        }
                    }
                }
                out.push((*input, Tensor::new(x.shape(), dx)?));
            }
            Op::SmoothL1 { input } => {
                out.push((*input, g.zip_map(self.value(*input), |d, x| d * smooth_l1_grad(x))?));
            }
            Op::SumAll { input } => {
                out.push((*input, Tensor::full(self.value(*input).shape(), g.data()[0])));
            }
        }
        Ok(out)
    }
}

fn check_assoc_pair<T: Scalar>(
    q: &Tensor<T>,
    other: &Tensor<T>,
    grid: &GridSpec,
    other_hw: (usize, usize),
) -> Result<(usize, usize)> {
    let (n, h, w, k) = q.dims4()?;
    if (h, w, k) != (grid.height, grid.width, NEIGHBORS) {
        return shape_err(format!("association must be [N, {}, {}, 9], got {:?}", grid.height, grid.width, q.shape()));
    }
    let (on, oh, ow, c) = other.dims4()?;
    if on != n || (oh, ow) != other_hw {
        return shape_err(format!("expected [{n}, {}, {}, C], got {:?}", other_hw.0, other_hw.1, other.shape()));
    }
    Ok((n, c))
}

/// `0.5 x^2` for `|x| < 1`, else `|x| - 0.5`.
pub fn smooth_l1<T: Scalar>(x: T) -> T {
    let a = x.abs();
    if a < T::one() {
        T::of(0.5) * x * x
    } else {
        a - T::of(0.5)
    }
}

fn smooth_l1_grad<T: Scalar>(x: T) -> T {
    if x.abs() < T::one() {
        x
    } else {
        x.signum()
    }
}
