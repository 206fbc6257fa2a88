//! Inference at a requested superpixel count.

use serde::{Deserialize, Serialize};

use super::SpixelNet;
use crate::error::{invalid, Result};
use crate::grid::AssociationMap;
use crate::resize::resize_bilinear;
use crate::scalar::Scalar;
use crate::segmentation::{enforce_connectivity, hard_assign, Connectivity, LabelMap};
use crate::tensor::Tensor;

/// Resize between the caller's image and the network input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResizeTransform {
    /// `(height, width)` of the original image.
    pub source: (usize, usize),
    /// `(height, width)` fed to the network.
    pub target: (usize, usize),
}

impl ResizeTransform {
    pub fn is_identity(&self) -> bool {
        self.source == self.target
    }

    /// Maps network-resolution labels back with nearest-neighbor sampling.
    pub fn labels_to_source(&self, labels: &LabelMap) -> LabelMap {
        if self.is_identity() {
            labels.clone()
        } else {
            labels.resize_nearest(self.source.1, self.source.0)
        }
    }

    /// Side length of one grid cell measured in source pixels.
    pub fn source_cell_size(&self, cell_size: usize) -> f64 {
        let scale = (self.source.0 * self.source.1) as f64 / (self.target.0 * self.target.1) as f64;
        cell_size as f64 * scale.sqrt()
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Picks network dimensions, multiples of `lcm(multiple, cell_size)`, whose
/// cell count is closest to `desired_n`. Each side is rounded down or up from
/// its aspect-preserving ideal; ties prefer the smaller aspect distortion and
/// then the smaller count.
pub fn choose_resize(height: usize, width: usize, desired_n: usize, cell_size: usize, multiple: usize) -> Result<ResizeTransform> {
    if desired_n < 4 {
        return invalid(format!("at least 4 superpixels are needed, got {desired_n}"));
    }
    if height == 0 || width == 0 || cell_size < 2 {
        return invalid(format!("cannot resize a {height}x{width} image for cell size {cell_size}"));
    }
    if ((height * width) as f64 / desired_n as f64).sqrt() < 2.0 {
        return invalid(format!(
            "{desired_n} superpixels would make cells under 2 pixels wide in a {height}x{width} image"
        ));
    }
    let unit = multiple / gcd(multiple, cell_size) * cell_size;
    let n = desired_n as f64;
    let ideal_h = cell_size as f64 * (n * height as f64 / width as f64).sqrt();
    let ideal_w = cell_size as f64 * (n * width as f64 / height as f64).sqrt();
    let around = |ideal: f64| {
        let lo = ((ideal / unit as f64).floor() as usize).max(1) * unit;
        let hi = ((ideal / unit as f64).ceil() as usize).max(1) * unit;
        [lo, hi]
    };
    let aspect = (width as f64 / height as f64).ln();
    // (count error, aspect distortion, count) -> (height, width)
    type Candidate = ((usize, f64, usize), (usize, usize));
    let mut best: Option<Candidate> = None;
    for th in around(ideal_h) {
        for tw in around(ideal_w) {
            let count = (th / cell_size) * (tw / cell_size);
            let key = (count.abs_diff(desired_n), ((tw as f64 / th as f64).ln() - aspect).abs(), count);
            if best.as_ref().is_none_or(|(b, _)| key.0 < b.0 || (key.0 == b.0 && (key.1 < b.1 - 1e-12 || (key.1 <= b.1 + 1e-12 && key.2 < b.2)))) {
                best = Some((key, (th, tw)));
            }
        }
    }
    let (_, target) = best.expect("four candidates");
    Ok(ResizeTransform { source: (height, width), target })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CountInference<T> {
    /// Association map at the network resolution.
    pub assoc: AssociationMap<T>,
    pub transform: ResizeTransform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation<T> {
    /// Connected superpixels at the original resolution.
    pub labels: LabelMap,
    /// Hard assignment (flat cell ids) at the network resolution.
    pub raw: LabelMap,
    pub inference: CountInference<T>,
}

impl<T: Scalar> SpixelNet<T> {
    /// Resizes `image` so the grid holds about `desired_n` cells and predicts
    /// its association map.
    pub fn infer_with_count(&self, image: &Tensor<T>, desired_n: usize, cell_size: usize) -> Result<CountInference<T>> {
        let (h, w, _) = image.dims3()?;
        let transform = choose_resize(h, w, desired_n, cell_size, self.spec().downsampling())?;
        let input = resize_bilinear(image, transform.target.0, transform.target.1)?;
        Ok(CountInference { assoc: self.predict(&input, cell_size)?, transform })
    }

    /// Hard superpixels at the original resolution with undersized pieces
    /// merged away.
    pub fn segment(&self, image: &Tensor<T>, desired_n: usize, cell_size: usize, connectivity: Connectivity) -> Result<Segmentation<T>> {
        let inference = self.infer_with_count(image, desired_n, cell_size)?;
        let raw = hard_assign(&inference.assoc);
        let mapped = inference.transform.labels_to_source(&raw);
        let cfg = Connectivity { cell_size: inference.transform.source_cell_size(cell_size), ..connectivity };
        Ok(Segmentation { labels: enforce_connectivity(&mapped, &cfg), raw, inference })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_sizes_are_fixed_points() {
        assert!(choose_resize(320, 480, 600, 16, 16).unwrap().is_identity());
        assert!(choose_resize(208, 208, 169, 16, 16).unwrap().is_identity());
    }

    #[test]
    fn closest_count_among_aspect_preserving_candidates() {
        // oracle: all multiples of 16 within one cell of the ideal side lengths
        for &(h, w, n) in &[(208usize, 208usize, 150usize), (321, 481, 300), (100, 300, 40), (64, 64, 20)] {
            let t = choose_resize(h, w, n, 16, 16).unwrap();
            let ideal_h = 16.0 * (n as f64 * h as f64 / w as f64).sqrt();
            let ideal_w = 16.0 * (n as f64 * w as f64 / h as f64).sqrt();
            let mut best = usize::MAX;
            for th in (16..2000).step_by(16) {
                for tw in (16..2000).step_by(16) {
                    let near = |t: usize, ideal: f64| (t as f64 - ideal).abs() < 16.0 || (t == 16 && ideal < 16.0);
                    if near(th, ideal_h) && near(tw, ideal_w) {
                        best = best.min(((th / 16) * (tw / 16)).abs_diff(n));
                    }
                }
            }
            let got = (t.target.0 / 16) * (t.target.1 / 16);
            assert_eq!(got.abs_diff(n), best, "{h}x{w} n={n} -> {:?}", t.target);
            assert!(t.target.0.is_multiple_of(16) && t.target.1.is_multiple_of(16));
        }
        assert_eq!(choose_resize(208, 208, 150, 16, 16).unwrap().target, (192, 192));
    }

    #[test]
    fn limits() {
        assert!(choose_resize(208, 208, 3, 16, 16).is_err());
        assert!(choose_resize(20, 20, 101, 16, 16).is_err());
        let t = choose_resize(64, 64, 64, 8, 16).unwrap();
        assert_eq!(t.target, (64, 64));
        assert_eq!(t.source_cell_size(8), 8.0);
    }
}
