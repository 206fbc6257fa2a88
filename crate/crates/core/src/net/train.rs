//! Mini-batch training with Adam, random crops and flips.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SpixelNet;
use crate::color::rgb_to_lab;
use crate::error::{invalid, shape_err, Error, Result};
use crate::graph::Graph;
use crate::grid::GridSpec;
use crate::losses::{semantic_loss, slic_loss, LossConfig, Reduction};
use crate::ops::BatchNormMode;
use crate::optim::AdamState;
use crate::scalar::Scalar;
use crate::segmentation::LabelMap;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    /// CIELAB color reconstruction with the Euclidean distance.
    Slic,
    /// One-hot label reconstruction with cross-entropy.
    Semantic,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slic" => Ok(Self::Slic),
            "sem" | "semantic" => Ok(Self::Semantic),
            other => invalid(format!("unknown loss {other:?} (expected slic or sem)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub cell_size: usize,
    /// `(height, width)` of random training crops.
    pub crop: (usize, usize),
    pub learning_rate: f64,
    pub iterations: usize,
    /// Iteration after which the learning rate is halved; two thirds of the
    /// run when unset.
    pub halve_at: Option<usize>,
    pub batch_size: usize,
    pub loss: LossKind,
    pub m: f64,
    /// Random horizontal and vertical flips.
    pub flips: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            cell_size: 16,
            crop: (208, 208),
            learning_rate: 5e-5,
            iterations: 300_000,
            halve_at: None,
            batch_size: 8,
            loss: LossKind::Semantic,
            m: 0.003,
            flips: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn halving_point(&self) -> usize {
        self.halve_at.unwrap_or(self.iterations * 2 / 3)
    }

    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        if iteration >= self.halving_point() {
            self.learning_rate / 2.0
        } else {
            self.learning_rate
        }
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        Ok(LossConfig::new(self.m, self.cell_size)?.with_reduction(Reduction::Mean))
    }
}

/// One training image with its optional ground-truth segments.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample<T> {
    /// `[H, W, 3]` sRGB in `[0, 1]`.
    pub image: Tensor<T>,
    pub labels: Option<LabelMap>,
}

/// Assembled crops: images `[B, H, W, 3]` and loss features `[B, H, W, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch<T> {
    pub images: Tensor<T>,
    pub features: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub loss: f64,
    pub property: f64,
    pub position: f64,
    pub learning_rate: f64,
}

/// Loss log as CSV: `iteration,loss,property,position`.
pub fn loss_log_csv(records: &[TrainRecord]) -> String {
    let mut s = String::from("iteration,loss,property,position\n");
    for r in records {
        writeln!(s, "{},{},{},{}", r.iteration, r.loss, r.property, r.position).unwrap();
    }
    s
}

/// Loss value and per-parameter gradients for one batch.
pub struct StepResult<T> {
    pub record: TrainRecord,
    pub gradients: Vec<Tensor<T>>,
    pub batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Drives training of a [`SpixelNet`] over an in-memory dataset.
pub struct Trainer<'a, T> {
    net: SpixelNet<T>,
    data: &'a [TrainSample<T>],
    /// Per-sample loss features at full resolution: Lab colors or label ids.
    features: Vec<Tensor<T>>,
    cfg: TrainConfig,
    loss_cfg: LossConfig,
    grid: GridSpec,
    adam: AdamState<T>,
    rng: ChaCha8Rng,
    iteration: usize,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    /// Validates the configuration and data and sets the network's input
    /// mean to the dataset color mean.
    pub fn new(mut net: SpixelNet<T>, data: &'a [TrainSample<T>], cfg: TrainConfig) -> Result<Self> {
        if data.is_empty() {
            return invalid("training needs at least one sample");
        }
        if cfg.iterations == 0 || cfg.batch_size == 0 {
            return invalid("iterations and batch size must be positive");
        }
        let d = net.spec().downsampling();
        if !cfg.crop.0.is_multiple_of(d) || !cfg.crop.1.is_multiple_of(d) {
            return invalid(format!("crop {:?} must be divisible by {d}", cfg.crop));
        }
        let loss_cfg = cfg.loss_config()?;
        let grid = GridSpec::new(cfg.crop.0, cfg.crop.1, cfg.cell_size)?;
        let mut features = Vec::with_capacity(data.len());
        let mut sums = [0.0f64; 3];
        let mut count = 0usize;
        for (i, s) in data.iter().enumerate() {
            let (h, w, c) = s.image.dims3()?;
            if c != 3 || h < cfg.crop.0 || w < cfg.crop.1 {
                return shape_err(format!("sample {i} is {h}x{w}x{c}; crops of {:?} need RGB images at least that large", cfg.crop));
            }
            for px in s.image.data().chunks_exact(3) {
                for ch in 0..3 {
                    sums[ch] += px[ch].to_f64().unwrap_or(0.0);
                }
            }
            count += h * w;
            features.push(match cfg.loss {
                LossKind::Slic => rgb_to_lab(&s.image)?.values,
                LossKind::Semantic => {
                    let labels = s
                        .labels
                        .as_ref()
                        .ok_or_else(|| Error::InvalidArgument(format!("sample {i} has no labels for the semantic loss")))?;
                    if (labels.height, labels.width) != (h, w) {
                        return shape_err(format!("sample {i} labels do not match its image"));
                    }
                    Tensor::new(&[h, w, 1], labels.labels.iter().map(|&l| T::of(l as f64)).collect())?
                }
            });
        }
        net.input_mean = sums.map(|s| s / count as f64);
        let adam = AdamState::new(net.params(), cfg.learning_rate);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self { net, data, features, cfg, loss_cfg, grid, adam, rng, iteration: 0 })
    }

    pub fn net(&self) -> &SpixelNet<T> {
        &self.net
    }

    pub fn into_net(self) -> SpixelNet<T> {
        self.net
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Draws the next random batch of crops.
    pub fn next_batch(&mut self) -> Result<TrainBatch<T>> {
        let (ch, cw) = self.cfg.crop;
        let b = self.cfg.batch_size;
        let fc = self.features[0].shape()[2];
        let mut images = Vec::with_capacity(b * ch * cw * 3);
        let mut feats = Vec::with_capacity(b * ch * cw * fc);
        for _ in 0..b {
            let i = self.rng.random_range(0..self.data.len());
            let (img, f) = (&self.data[i].image, &self.features[i]);
            let (h, w, _) = img.dims3()?;
            let y0 = self.rng.random_range(0..=h - ch);
            let x0 = self.rng.random_range(0..=w - cw);
            let flip_x = self.cfg.flips && self.rng.random_bool(0.5);
            let flip_y = self.cfg.flips && self.rng.random_bool(0.5);
            for y in 0..ch {
                let sy = y0 + if flip_y { ch - 1 - y } else { y };
                for x in 0..cw {
                    let sx = x0 + if flip_x { cw - 1 - x } else { x };
                    let p = sy * w + sx;
                    images.extend_from_slice(&img.data()[p * 3..p * 3 + 3]);
                    feats.extend_from_slice(&f.data()[p * fc..(p + 1) * fc]);
                }
            }
        }
        let images = Tensor::new(&[b, ch, cw, 3], images)?;
        let features = match self.cfg.loss {
            LossKind::Slic => Tensor::new(&[b, ch, cw, fc], feats)?,
            LossKind::Semantic => {
                let classes = feats.iter().map(|v| v.to_usize().unwrap_or(0)).max().unwrap_or(0) + 1;
                let mut onehot = vec![T::zero(); feats.len() * classes];
                for (p, v) in feats.iter().enumerate() {
                    onehot[p * classes + v.to_usize().unwrap_or(0)] = T::one();
                }
                Tensor::new(&[b, ch, cw, classes], onehot)?
            }
        };
        Ok(TrainBatch { images, features })
    }

    /// Loss and parameter gradients for a batch, with train-mode
    /// normalization. Does not change the network.
    pub fn evaluate(&self, batch: &TrainBatch<T>) -> Result<StepResult<T>> {
        let mut g = Graph::new();
        let input = g.constant(self.net.prepare_input(&batch.images)?);
        let pass = self.net.forward(&mut g, input, &self.grid, BatchNormMode::Train)?;
        let f = g.constant(batch.features.clone());
        let terms = match self.cfg.loss {
            LossKind::Slic => slic_loss(&mut g, pass.q, f, &self.grid, &self.loss_cfg)?,
            LossKind::Semantic => semantic_loss(&mut g, pass.q, f, &self.grid, &self.loss_cfg)?,
        };
        let mut grads = g.backward(terms.total)?;
        let read = |v| g.value(v).data()[0].to_f64().unwrap_or(f64::NAN);
        let record = TrainRecord {
            iteration: self.iteration + 1,
            loss: read(terms.total),
            property: read(terms.property),
            position: read(terms.position),
            learning_rate: self.cfg.learning_rate_at(self.iteration),
        };
        let gradients = pass.params.iter().map(|&p| grads.take(p)).collect();
        Ok(StepResult { record, gradients, batch_stats: pass.batch_stats })
    }

    /// One optimization step on a fresh batch.
    pub fn step(&mut self) -> Result<TrainRecord> {
        let batch = self.next_batch()?;
        let result = self.evaluate(&batch)?;
        if !result.record.loss.is_finite() {
            return invalid(format!("loss became {} at iteration {}", result.record.loss, result.record.iteration));
        }
        self.adam.learning_rate = result.record.learning_rate;
        self.adam.step(self.net.params_mut(), &result.gradients)?;
        self.net.update_norm_stats(&result.batch_stats)?;
        self.iteration += 1;
        Ok(result.record)
    }

    /// Runs the remaining iterations, reporting every record to `on_record`.
    pub fn run(&mut self, mut on_record: impl FnMut(&TrainRecord)) -> Result<Vec<TrainRecord>> {
        let mut history = Vec::with_capacity(self.cfg.iterations - self.iteration.min(self.cfg.iterations));
        while self.iteration < self.cfg.iterations {
            let r = self.step()?;
            on_record(&r);
            history.push(r);
        }
        Ok(history)
    }
}

impl<T: Scalar> SpixelNet<T> {
    /// Trains a copy of this network and returns it with the loss history.
    pub fn train(&self, data: &[TrainSample<T>], cfg: &TrainConfig) -> Result<(SpixelNet<T>, Vec<TrainRecord>)> {
        let mut trainer = Trainer::new(self.clone(), data, cfg.clone())?;
        let history = trainer.run(|_| {})?;
        Ok((trainer.into_net(), history))
    }
}
