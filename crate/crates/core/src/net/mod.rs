//! The association network: an encoder-decoder with skip concatenations whose
//! 9-channel output is softmax-normalized and masked to valid grid cells.

mod infer;
mod spec;
mod train;

pub use infer::{choose_resize, CountInference, ResizeTransform, Segmentation};
pub use spec::{LayerKind, LayerSpec, NetworkSpec, INPUT};
pub use train::{loss_log_csv, LossKind, StepResult, TrainBatch, TrainConfig, TrainRecord, TrainSample, Trainer};

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::error::{invalid, shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::grid::{AssociationMap, GridSpec, NEIGHBORS, OFFSETS};
use crate::ops::{BatchNormMode, BatchNormState, ConvGeometry};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
struct LayerParams {
    weight: usize,
    bias: Option<usize>,
    /// `(gamma, beta, index into the batch-norm states)`
    norm: Option<(usize, usize, usize)>,
}

/// Network parameters, batch-norm statistics and input normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct SpixelNet<T> {
    spec: NetworkSpec,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    layers: Vec<LayerParams>,
    norms: Vec<BatchNormState<T>>,
    /// Per-channel mean subtracted from `[0, 1]` input colors.
    pub input_mean: [f64; 3],
}

/// Graph nodes produced by one forward pass.
pub struct ForwardPass {
    /// Leaf variables for every parameter, in [`SpixelNet::param_names`] order.
    pub params: Vec<Var>,
    /// Masked probabilities `[N, 9, H, W]`.
    pub probs: Var,
    /// The same probabilities as `[N, H, W, 9]`.
    pub q: Var,
    /// Batch statistics per normalization layer (train mode only).
    pub batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

fn kaiming<T: Scalar>(shape: &[usize], fan_in: usize, slope: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let std = (2.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::of(normal.sample(rng)))
}

impl<T: Scalar> SpixelNet<T> {
    /// Kaiming fan-in initialization from a seeded generator; zero biases,
    /// unit scales.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Self {
            spec: spec.clone(),
            names: Vec::new(),
            params: Vec::new(),
            layers: Vec::new(),
            norms: Vec::new(),
            input_mean: [0.0; 3],
        };
        for layer in &spec.layers {
            let (k, cin, cout) = (layer.kernel, layer.in_channels, layer.out_channels);
            let (shape, fan_in) = match layer.kind {
                LayerKind::TransposedConv => {
                    let taps = k.div_ceil(layer.stride);
                    (vec![cin, cout, k, k], cin * taps * taps)
                }
                _ => (vec![cout, cin, k, k], cin * k * k),
            };
            let weight = net.push(format!("{}.weight", layer.name), kaiming(&shape, fan_in, spec.negative_slope, &mut rng));
            let normed = spec.batch_norm && layer.kind != LayerKind::Predict;
            let bias = (!normed).then(|| net.push(format!("{}.bias", layer.name), Tensor::zeros(&[cout])));
            let norm = normed.then(|| {
                let g = net.push(format!("{}.gamma", layer.name), Tensor::full(&[cout], T::one()));
                let b = net.push(format!("{}.beta", layer.name), Tensor::zeros(&[cout]));
                net.norms.push(BatchNormState::new(cout));
                (g, b, net.norms.len() - 1)
            });
            net.layers.push(LayerParams { weight, bias, norm });
        }
        Ok(net)
    }

    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn norm_states(&self) -> &[BatchNormState<T>] {
        &self.norms
    }

    /// Number of scalar parameters.
    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Folds batch statistics from a train-mode pass into the running
    /// estimates.
    pub fn update_norm_stats(&mut self, stats: &[(Vec<f64>, Vec<f64>)]) -> Result<()> {
        if stats.len() != self.norms.len() {
            return shape_err(format!("{} batch statistics for {} normalization layers", stats.len(), self.norms.len()));
        }
        for (state, (mean, var)) in self.norms.iter_mut().zip(stats) {
            state.update(mean, var);
        }
        Ok(())
    }

    /// Scales `[N, H, W, 3]` colors in `[0, 1]` to a mean-centered
    /// `[N, 3, H, W]` network input.
    pub fn prepare_input(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, _, _, c) = images.dims4()?;
        if c != 3 {
            return shape_err(format!("expected RGB images, got {c} channels"));
        }
        let mean = self.input_mean.map(T::of);
        let mut centered = images.clone();
        for px in centered.data_mut().chunks_exact_mut(3) {
            for (v, m) in px.iter_mut().zip(&mean) {
                *v -= *m;
            }
        }
        centered.to_channels_first()
    }

    /// Records the network on `g` for an `[N, 3, H, W]` input.
    pub fn forward(&self, g: &mut Graph<T>, input: Var, grid: &GridSpec, mode: BatchNormMode) -> Result<ForwardPass> {
        let (_, c, h, w) = g.value(input).dims4()?;
        if c != 3 {
            return shape_err(format!("network input needs 3 channels, got {c}"));
        }
        self.spec.spatial_sizes(h, w)?;
        if (grid.height, grid.width) != (h, w) {
            return shape_err(format!("grid covers {}x{} but the input is {h}x{w}", grid.height, grid.width));
        }
        let params: Vec<Var> = self.params.iter().map(|p| g.variable(p.clone())).collect();
        let mut outputs: HashMap<&str, Var> = HashMap::from([(INPUT, input)]);
        let mut batch_stats = Vec::new();
        let slope = T::of(self.spec.negative_slope);
        let mut last = input;
        for (layer, lp) in self.spec.layers.iter().zip(&self.layers) {
            let sources: Vec<Var> = layer.inputs.iter().map(|n| outputs[n.as_str()]).collect();
            let x = if sources.len() == 1 { sources[0] } else { g.concat_channels(&sources)? };
            let (wv, bv) = (params[lp.weight], lp.bias.map(|b| params[b]));
            let mut y = match layer.kind {
                LayerKind::TransposedConv => {
                    let geo = ConvGeometry::new(layer.stride, (layer.kernel - layer.stride) / 2, 1);
                    g.conv_transpose2d(x, wv, bv, geo)?
                }
                _ => g.conv2d(x, wv, bv, ConvGeometry::same(layer.kernel, layer.stride))?,
            };
            if let Some((gamma, beta, s)) = lp.norm {
                let (v, stats) = g.batch_norm(y, params[gamma], params[beta], &self.norms[s], mode)?;
                batch_stats.extend(stats);
                y = v;
            }
            if layer.kind != LayerKind::Predict {
                y = g.leaky_relu(y, slope);
            }
            outputs.insert(&layer.name, y);
            last = y;
        }
        let soft = g.softmax_channels(last)?;
        let probs = g.mask_renormalize(soft, *grid)?;
        let q = g.channels_last(probs)?;
        Ok(ForwardPass { params, probs, q, batch_stats })
    }

    /// Association maps for a batch of `[N, H, W, 3]` images in eval mode.
    pub fn predict_batch(&self, images: &Tensor<T>, cell_size: usize) -> Result<Vec<AssociationMap<T>>> {
        let (n, h, w, _) = images.dims4()?;
        let grid = GridSpec::new(h, w, cell_size)?;
        let mut g = Graph::new();
        let input = g.constant(self.prepare_input(images)?);
        let pass = self.forward(&mut g, input, &grid, BatchNormMode::Eval)?;
        let q = g.value(pass.q);
        (0..n)
            .map(|i| AssociationMap::new_unchecked(q.index_first(i)?, grid))
            .collect()
    }

    /// Association map for one `[H, W, 3]` image.
    pub fn predict(&self, image: &Tensor<T>, cell_size: usize) -> Result<AssociationMap<T>> {
        let (h, w, c) = image.dims3()?;
        let batch = image.clone().reshape(&[1, h, w, c])?;
        Ok(self.predict_batch(&batch, cell_size)?.remove(0))
    }

    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> Checkpoint<T> {
        let mut tensors: Vec<(String, Tensor<T>)> = self.names.iter().cloned().zip(self.params.iter().cloned()).collect();
        let norm_layers = self.spec.layers.iter().zip(&self.layers).filter_map(|(l, p)| p.norm.map(|n| (l, n.2)));
        for (layer, s) in norm_layers {
            tensors.push((format!("{}.running_mean", layer.name), self.norms[s].running_mean.clone()));
            tensors.push((format!("{}.running_var", layer.name), self.norms[s].running_var.clone()));
        }
        Checkpoint {
            tensors,
            metadata: json!({
                "format": "gridpix-net",
                "spec": self.spec,
                "input_mean": self.input_mean,
                "extra": metadata,
            }),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let meta = &ckpt.metadata;
        if meta.get("format").and_then(|f| f.as_str()) != Some("gridpix-net") {
            return Err(Error::Checkpoint("not a network checkpoint".into()));
        }
        let spec: NetworkSpec = serde_json::from_value(meta["spec"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad network spec: {e}")))?;
        let input_mean: [f64; 3] = serde_json::from_value(meta["input_mean"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad input mean: {e}")))?;
        let mut net = Self::new(spec, 0)?;
        net.input_mean = input_mean;
        let fetch = |name: &str, like: &Tensor<T>| -> Result<Tensor<T>> {
            let t = ckpt.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != like.shape() {
                return Err(Error::Checkpoint(format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), like.shape())));
            }
            Ok(t.clone())
        };
        for i in 0..net.params.len() {
            net.params[i] = fetch(&net.names[i], &net.params[i])?;
        }
        let norm_layers: Vec<(String, usize)> = net
            .spec
            .layers
            .iter()
            .zip(&net.layers)
            .filter_map(|(l, p)| p.norm.map(|n| (l.name.clone(), n.2)))
            .collect();
        for (name, s) in norm_layers {
            net.norms[s].running_mean = fetch(&format!("{name}.running_mean"), &net.norms[s].running_mean)?;
            net.norms[s].running_var = fetch(&format!("{name}.running_var"), &net.norms[s].running_var)?;
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>, metadata: serde_json::Value) -> Result<()> {
        self.to_checkpoint(metadata).save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Mirrors an association map left-right, moving each probability to the
/// channel of the mirrored offset. Requires the cell size to divide the width.
pub fn flip_assoc_horizontal<T: Scalar>(assoc: &AssociationMap<T>) -> Result<AssociationMap<T>> {
    let g = *assoc.grid();
    if !g.width.is_multiple_of(g.cell_size) {
        return invalid("horizontal flip needs whole cells across the width");
    }
    let mirror: Vec<usize> = OFFSETS
        .iter()
        .map(|&(di, dj)| OFFSETS.iter().position(|&o| o == (di, -dj)).expect("offsets are symmetric"))
        .collect();
    let src = assoc.probs();
    let probs = Tensor::from_fn(&[g.height, g.width, NEIGHBORS], |i| {
        src.at(&[i[0], g.width - 1 - i[1], mirror[i[2]]])
    });
    AssociationMap::new_unchecked(probs, g)
}

/// Mirrors an `[H, W, C]` image left-right.
pub fn flip_horizontal<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = image.dims3()?;
    Ok(Tensor::from_fn(&[h, w, c], |i| image.at(&[i[0], w - 1 - i[1], i[2]])))
}

/// Mean absolute difference between `Q(flip(x))` and `flip(Q(x))`.
pub fn flip_equivariance_gap<T: Scalar>(net: &SpixelNet<T>, image: &Tensor<T>, cell_size: usize) -> Result<f64> {
    let direct = flip_assoc_horizontal(&net.predict(image, cell_size)?)?;
    let flipped = net.predict(&flip_horizontal(image)?, cell_size)?;
    let a = direct.probs().data();
    let b = flipped.probs().data();
    Ok(a.iter().zip(b).map(|(x, y)| (x.to_f64().unwrap_or(0.0) - y.to_f64().unwrap_or(0.0)).abs()).sum::<f64>() / a.len() as f64)
}
