//! Declarative layer lists for the association network.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};

/// Name of the network input in `LayerSpec::inputs`.
pub const INPUT: &str = "image";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    TransposedConv,
    /// Final convolution whose output goes through softmax and border masking.
    Predict,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Source layers; more than one are concatenated along channels.
    pub inputs: Vec<String>,
}

impl LayerSpec {
    fn new(name: &str, kind: LayerKind, kernel: usize, stride: usize, io: (usize, usize), inputs: &[&str]) -> Self {
        Self {
            name: name.into(),
            kind,
            kernel,
            stride,
            in_channels: io.0,
            out_channels: io.1,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub negative_slope: f64,
    /// Batch normalization after every non-prediction layer. Without it those
    /// layers carry a bias instead.
    pub batch_norm: bool,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        use LayerKind::*;
        let l = LayerSpec::new;
        Self {
            layers: vec![
                l("cnv0a", Conv, 3, 1, (3, 16), &[INPUT]),
                l("cnv0b", Conv, 3, 1, (16, 16), &["cnv0a"]),
                l("cnv1a", Conv, 3, 2, (16, 32), &["cnv0b"]),
                l("cnv1b", Conv, 3, 1, (32, 32), &["cnv1a"]),
                l("cnv2a", Conv, 3, 2, (32, 64), &["cnv1b"]),
                l("cnv2b", Conv, 3, 1, (64, 64), &["cnv2a"]),
                l("cnv3a", Conv, 3, 2, (64, 128), &["cnv2b"]),
                l("cnv3b", Conv, 3, 1, (128, 128), &["cnv3a"]),
                l("cnv4a", Conv, 3, 2, (128, 256), &["cnv3b"]),
                l("cnv4b", Conv, 3, 1, (256, 256), &["cnv4a"]),
                l("upcnv3", TransposedConv, 4, 2, (256, 128), &["cnv4b"]),
                l("icnv3", Conv, 3, 1, (256, 128), &["upcnv3", "cnv3b"]),
                l("upcnv2", TransposedConv, 4, 2, (128, 64), &["icnv3"]),
                l("icnv2", Conv, 3, 1, (128, 64), &["upcnv2", "cnv2b"]),
                l("upcnv1", TransposedConv, 4, 2, (64, 32), &["icnv2"]),
                l("icnv1", Conv, 3, 1, (64, 32), &["upcnv1", "cnv1b"]),
                l("upcnv0", TransposedConv, 4, 2, (32, 16), &["icnv1"]),
                l("icnv0", Conv, 3, 1, (32, 16), &["upcnv0", "cnv0b"]),
                l("assoc", Predict, 3, 1, (16, 9), &["icnv0"]),
            ],
            negative_slope: 0.1,
            batch_norm: true,
        }
    }
}

impl NetworkSpec {
    /// The default layout with `cnv4a`/`cnv4b` narrowed to `channels` and
    /// optionally without batch normalization.
    pub fn with_bottleneck(channels: usize, batch_norm: bool) -> Self {
        let mut spec = Self { batch_norm, ..Self::default() };
        for layer in &mut spec.layers {
            match layer.name.as_str() {
                "cnv4a" => layer.out_channels = channels,
                "cnv4b" => (layer.in_channels, layer.out_channels) = (channels, channels),
                "upcnv3" => layer.in_channels = channels,
                _ => {}
            }
        }
        spec
    }

    /// Total downsampling factor of the encoder.
    pub fn downsampling(&self) -> usize {
        self.layers.iter().filter(|l| l.kind == LayerKind::Conv).map(|l| l.stride).product()
    }

    /// Checks names, sources, channel bookkeeping and that the last layer is
    /// the single 9-channel prediction layer.
    pub fn validate(&self) -> Result<()> {
        let mut channels: HashMap<&str, usize> = HashMap::from([(INPUT, 3)]);
        for (i, layer) in self.layers.iter().enumerate() {
            if channels.contains_key(layer.name.as_str()) {
                return invalid(format!("duplicate layer name {}", layer.name));
            }
            if layer.kernel == 0 || layer.stride == 0 || layer.inputs.is_empty() {
                return invalid(format!("layer {} needs a kernel, a stride and an input", layer.name));
            }
            match layer.kind {
                LayerKind::TransposedConv if (layer.kernel - layer.stride) % 2 != 0 || layer.kernel < layer.stride => {
                    return invalid(format!("transposed layer {} cannot scale exactly by its stride", layer.name));
                }
                LayerKind::Conv | LayerKind::Predict if layer.kernel % 2 == 0 => {
                    return invalid(format!("layer {} needs an odd kernel for same padding", layer.name));
                }
                _ => {}
            }
            let mut total = 0;
            for src in &layer.inputs {
                match channels.get(src.as_str()) {
                    Some(c) => total += c,
                    None => return invalid(format!("layer {} reads unknown or later layer {src}", layer.name)),
                }
            }
            if total != layer.in_channels {
                return shape_err(format!(
                    "layer {} expects {} input channels but its sources provide {total}",
                    layer.name, layer.in_channels
                ));
            }
            let last = i + 1 == self.layers.len();
            if (layer.kind == LayerKind::Predict) != last {
                return invalid("exactly the last layer must be the prediction layer");
            }
            if last && layer.out_channels != 9 {
                return invalid(format!("prediction layer must output 9 channels, got {}", layer.out_channels));
            }
            channels.insert(&layer.name, layer.out_channels);
        }
        if self.layers.is_empty() {
            return invalid("empty network");
        }
        Ok(())
    }

    /// Output `(height, width)` of every layer for an input size, rejecting
    /// concatenations of mismatched maps.
    pub fn spatial_sizes(&self, height: usize, width: usize) -> Result<Vec<(String, (usize, usize))>> {
        self.validate()?;
        let d = self.downsampling();
        if !height.is_multiple_of(d) || !width.is_multiple_of(d) || height == 0 || width == 0 {
            return shape_err(format!("input {height}x{width} is not divisible by {d}; pad or resize it first"));
        }
        let mut sizes: HashMap<&str, (usize, usize)> = HashMap::from([(INPUT, (height, width))]);
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let first = sizes[layer.inputs[0].as_str()];
            for src in &layer.inputs[1..] {
                if sizes[src.as_str()] != first {
                    return shape_err(format!(
                        "layer {} concatenates {:?} from {} with {:?} from {}",
                        layer.name, first, layer.inputs[0], sizes[src.as_str()], src
                    ));
                }
            }
            let (h, w) = first;
            let size = match layer.kind {
                LayerKind::TransposedConv => (h * layer.stride, w * layer.stride),
                _ => {
                    let pad = (layer.kernel - 1) / 2;
                    let f = |n: usize| {
                        if n + 2 * pad < layer.kernel {
                            0
                        } else {
                            (n + 2 * pad - layer.kernel) / layer.stride + 1
                        }
                    };
                    (f(h), f(w))
                }
            };
            if size.0 == 0 || size.1 == 0 {
                return shape_err(format!("layer {} output vanishes for a {height}x{width} input", layer.name));
            }
            sizes.insert(&layer.name, size);
            out.push((layer.name.clone(), size));
        }
        if out.last().map(|(_, s)| *s) != Some((height, width)) {
            return shape_err(format!(
                "input {height}x{width} must be divisible by {}; pad or resize it first",
                self.downsampling()
            ));
        }
        Ok(out)
    }
}
