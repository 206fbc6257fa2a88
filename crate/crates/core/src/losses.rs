//! Training objectives built on the differentiable graph.
//!
//! Every superpixel loss has a property term comparing `f(p)` with its
//! reconstruction `f'(p)` and a position term `(m / S) ||p - p'||_2`, both
//! obtained by computing centers from the association map and then
//! reconstructing every pixel from its 9 candidate cells.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::grid::{AssociationMap, GridSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Guard inside the cross-entropy logarithm.
pub const CROSS_ENTROPY_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Distance {
    /// Euclidean norm of `f - f'` (CIELAB color).
    L2,
    /// `-sum_k f_k ln(f'_k + eps)` (one-hot labels).
    CrossEntropy,
}

impl FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(Self::L2),
            "cross-entropy" | "ce" => Ok(Self::CrossEntropy),
            other => invalid(format!("unknown distance metric {other:?} (expected l2 or cross-entropy)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reduction {
    Sum,
    /// Divide by the number of pixels in the batch.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Compactness weight.
    pub m: f64,
    /// Sampling interval, equal to the grid cell size.
    pub cell_size: usize,
    /// Weight of the superpixel term in the joint loss.
    pub lambda: f64,
    /// Per-stage weights of the disparity term.
    pub alphas: [f64; 3],
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { m: 0.003, cell_size: 16, lambda: 0.1, alphas: [0.5, 0.7, 1.0], reduction: Reduction::Mean }
    }
}

impl LossConfig {
    pub fn new(m: f64, cell_size: usize) -> Result<Self> {
        let cfg = Self { m, cell_size, ..Self::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_reduction(mut self, reduction: Reduction) -> Self {
        self.reduction = reduction;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.m.is_finite() || self.m < 0.0 {
            return invalid(format!("m must be a finite non-negative number, got {}", self.m));
        }
        if self.cell_size < 2 {
            return invalid(format!("cell size must be at least 2, got {}", self.cell_size));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return invalid(format!("lambda must be non-negative, got {}", self.lambda));
        }
        Ok(())
    }
}

/// Scalar nodes of one superpixel loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub property: Var,
    /// Already multiplied by `m / S`.
    pub position: Var,
}

/// `q [N, H, W, 9]` (masked probabilities) and `features [N, H, W, C]`.
pub fn general_loss<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    features: Var,
    dist: Distance,
    grid: &GridSpec,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    if cfg.cell_size != grid.cell_size {
        return invalid(format!(
            "loss sampling interval {} differs from grid cell size {}",
            cfg.cell_size, grid.cell_size
        ));
    }
    let n = g.value(q).shape()[0];
    let fshape = g.value(features).shape().to_vec();
    if fshape.len() != 4 || fshape[..3] != [n, grid.height, grid.width] {
        return shape_err(format!("features {fshape:?} do not match the association map"));
    }

    let centers = g.centers(q, features, *grid)?;
    let recon = g.reconstruct(q, centers, *grid)?;
    let property = match dist {
        Distance::L2 => {
            let diff = g.sub(features, recon)?;
            let norms = g.norm_last_axis(diff)?;
            g.sum_all(norms)
        }
        Distance::CrossEntropy => {
            let shifted = g.add_scalar(recon, T::of(CROSS_ENTROPY_EPS));
            let logs = g.ln(shifted);
            let weighted = g.mul(features, logs)?;
            let s = g.sum_all(weighted);
            g.scale(s, -T::one())
        }
    };

    let coords = Tensor::stack(&vec![grid.coordinates::<T>(); n])?;
    let coords = g.constant(coords);
    let loc_centers = g.centers(q, coords, *grid)?;
    let loc_recon = g.reconstruct(q, loc_centers, *grid)?;
    let diff = g.sub(coords, loc_recon)?;
    let dist_px = g.norm_last_axis(diff)?;
    let pos_sum = g.sum_all(dist_px);
    let position = g.scale(pos_sum, T::of(cfg.m / grid.cell_size as f64));

    let (property, position) = match cfg.reduction {
        Reduction::Sum => (property, position),
        Reduction::Mean => {
            let inv = T::of(1.0 / (n * grid.n_pixels()) as f64);
            (g.scale(property, inv), g.scale(position, inv))
        }
    };
    let total = g.add(property, position)?;
    Ok(LossTerms { total, property, position })
}

/// CIELAB color with the Euclidean distance.
pub fn slic_loss<T: Scalar>(g: &mut Graph<T>, q: Var, lab: Var, grid: &GridSpec, cfg: &LossConfig) -> Result<LossTerms> {
    general_loss(g, q, lab, Distance::L2, grid, cfg)
}

/// One-hot labels with cross-entropy.
pub fn semantic_loss<T: Scalar>(g: &mut Graph<T>, q: Var, onehot: Var, grid: &GridSpec, cfg: &LossConfig) -> Result<LossTerms> {
    general_loss(g, q, onehot, Distance::CrossEntropy, grid, cfg)
}

#[derive(Clone, Copy, Debug)]
pub struct JointTerms {
    pub total: Var,
    pub disparity: Var,
    pub superpixel: Var,
}

/// `sum_s alpha_s mean_valid smooth_l1(d_s - d_gt) + (lambda / N) L_SLIC`,
/// where `N` is the number of valid pixels and `L_SLIC` is a pixel sum.
///
/// Predictions and ground truth are `[N, H, W]`; `valid` holds 0/1 weights.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss<T: Scalar>(
    g: &mut Graph<T>,
    preds: [Var; 3],
    gt: Var,
    valid: &Tensor<T>,
    q: Var,
    lab: Var,
    grid: &GridSpec,
    cfg: &LossConfig,
) -> Result<JointTerms> {
    let n_valid = valid.data().iter().filter(|&&v| v > T::zero()).count();
    if n_valid == 0 {
        return invalid("joint loss needs at least one valid pixel");
    }
    if valid.shape() != g.value(gt).shape() {
        return shape_err(format!("valid mask {:?} does not match ground truth {:?}", valid.shape(), g.value(gt).shape()));
    }
    let mask = g.constant(valid.clone());
    let inv_n = T::of(1.0 / n_valid as f64);
    let mut disparity: Option<Var> = None;
    for (pred, &alpha) in preds.iter().zip(&cfg.alphas) {
        let err = g.sub(*pred, gt)?;
        let l = g.smooth_l1(err);
        let masked = g.mul(l, mask)?;
        let s = g.sum_all(masked);
        let term = g.scale(s, T::of(alpha) * inv_n);
        disparity = Some(match disparity {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let disparity = disparity.expect("three stages");
    let sum_cfg = cfg.clone().with_reduction(Reduction::Sum);
    let slic = slic_loss(g, q, lab, grid, &sum_cfg)?;
    let superpixel = g.scale(slic.total, T::of(cfg.lambda) * inv_n);
    let total = g.add(disparity, superpixel)?;
    Ok(JointTerms { total, disparity, superpixel })
}

/// Loss values evaluated eagerly on a single image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub property: f64,
    pub position: f64,
}

/// Evaluates [`general_loss`] for one association map and `[H, W, C]` features.
pub fn evaluate<T: Scalar>(
    assoc: &AssociationMap<T>,
    features: &Tensor<T>,
    dist: Distance,
    cfg: &LossConfig,
) -> Result<LossValue> {
    let grid = *assoc.grid();
    let mut g = Graph::new();
    let q = g.constant(assoc.probs().clone().reshape(&[1, grid.height, grid.width, 9])?);
    let (h, w, c) = features.dims3()?;
    let f = g.constant(features.clone().reshape(&[1, h, w, c])?);
    let terms = general_loss(&mut g, q, f, dist, &grid, cfg)?;
    let read = |v: Var| g.value(v).data()[0].to_f64().unwrap_or(f64::NAN);
    Ok(LossValue { total: read(terms.total), property: read(terms.property), position: read(terms.position) })
}

/// One-hot encoding `[H, W, classes]` of a label image.
pub fn one_hot<T: Scalar>(labels: &[u32], height: usize, width: usize, classes: usize) -> Result<Tensor<T>> {
    if labels.len() != height * width {
        return shape_err("label buffer does not match the image size");
    }
    let mut out = Tensor::zeros(&[height, width, classes]);
    for (p, &l) in labels.iter().enumerate() {
        if l as usize >= classes {
            return invalid(format!("label {l} exceeds {classes} classes"));
        }
        out.data_mut()[p * classes + l as usize] = T::one();
    }
    Ok(out)
}
