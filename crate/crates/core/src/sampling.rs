//! Superpixel-driven downsampling and upsampling of dense maps, with a
//! block-average plus bilinear baseline.

use crate::error::{invalid, shape_err, Result};
use crate::grid::{compute_centers, reconstruct_values, AssociationMap, GridSpec, NEIGHBORS};
use crate::resize::resize_bilinear;
use crate::scalar::Scalar;
use crate::segmentation::LabelMap;
use crate::tensor::Tensor;

/// Cell `(i, j)` of the result is the association-weighted mean of the
/// features reaching that cell.
pub fn downsample<T: Scalar>(assoc: &AssociationMap<T>, features: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(compute_centers(assoc, features)?.properties)
}

/// Every pixel becomes the association-weighted mix of its 9 candidate cells.
pub fn upsample<T: Scalar>(assoc: &AssociationMap<T>, low_res: &Tensor<T>) -> Result<Tensor<T>> {
    reconstruct_values(assoc, low_res)
}

pub fn bilinear_upsample<T: Scalar>(low_res: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let (h, w, _) = low_res.dims3()?;
    if height < h || width < w {
        return invalid(format!("bilinear upsample target {height}x{width} is smaller than {h}x{w}"));
    }
    resize_bilinear(low_res, height, width)
}

/// Plain mean over each grid cell's pixels.
pub fn block_mean<T: Scalar>(features: &Tensor<T>, grid: &GridSpec) -> Result<Tensor<T>> {
    downsample(&AssociationMap::owning(*grid), features)
}

/// Pixels with a 4-neighbor of a different ground-truth label.
pub fn edge_mask(labels: &LabelMap) -> Vec<bool> {
    labels.boundary_mask()
}

/// Mean absolute error between `gt` and `reconstructed` over masked pixels
/// (all channels).
pub fn edge_preservation_score<T: Scalar>(gt: &Tensor<T>, reconstructed: &Tensor<T>, mask: &[bool]) -> Result<f64> {
    gt.check_same_shape(reconstructed)?;
    let (h, w) = (gt.shape()[0], gt.shape().get(1).copied().unwrap_or(1));
    if mask.len() != h * w {
        return shape_err(format!("mask of {} pixels for a {h}x{w} map", mask.len()));
    }
    let c = gt.len() / (h * w);
    let (mut total, mut count) = (0.0, 0usize);
    for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for ch in 0..c {
            let i = p * c + ch;
            total += (gt.data()[i].to_f64().unwrap_or(f64::NAN) - reconstructed.data()[i].to_f64().unwrap_or(f64::NAN)).abs();
            count += 1;
        }
    }
    if count == 0 {
        return invalid("edge mask selects no pixels");
    }
    Ok(total / count as f64)
}

/// Edge scores `(superpixel, bilinear)` for one map: the superpixel path
/// downsamples and upsamples through `assoc`, the baseline takes block means
/// and upsamples bilinearly.
pub fn compare_upsamplers<T: Scalar>(assoc: &AssociationMap<T>, signal: &Tensor<T>, gt_labels: &LabelMap) -> Result<(f64, f64)> {
    let grid = assoc.grid();
    let mask = edge_mask(gt_labels);
    let ours = upsample(assoc, &downsample(assoc, signal)?)?;
    let base = bilinear_upsample(&block_mean(signal, grid)?, grid.height, grid.width)?;
    Ok((edge_preservation_score(signal, &ours, &mask)?, edge_preservation_score(signal, &base, &mask)?))
}

/// Association from soft k-means over color and position, without a trained
/// network. `features` is `[H, W, C]` (typically CIELAB); `m` weighs the
/// spatial term as in SLIC and `temperature` sets the softness.
pub fn soft_color_association<T: Scalar>(
    features: &Tensor<T>,
    grid: &GridSpec,
    m: f64,
    temperature: f64,
    iterations: usize,
) -> Result<AssociationMap<T>> {
    let (h, w, c) = features.dims3()?;
    if (h, w) != (grid.height, grid.width) {
        return shape_err("features do not match the grid");
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return invalid(format!("temperature must be positive, got {temperature}"));
    }
    let f: Tensor<f64> = features.cast();
    let spatial = (m / grid.cell_size as f64).powi(2);
    let mut assoc = AssociationMap::<f64>::owning(*grid);
    for _ in 0..=iterations {
        let centers = compute_centers(&assoc, &f)?;
        let mut scores = Tensor::zeros(&[h, w, NEIGHBORS]);
        for y in 0..h {
            for x in 0..w {
                let mut d = [f64::INFINITY; NEIGHBORS];
                for (k, dk) in d.iter_mut().enumerate() {
                    if let Some(s) = grid.neighbor(x, y, k) {
                        let u = &centers.properties.data()[s * c..(s + 1) * c];
                        let l = &centers.locations.data()[s * 2..s * 2 + 2];
                        let dc: f64 = (0..c).map(|ch| (f.at(&[y, x, ch]) - u[ch]).powi(2)).sum();
                        *dk = dc + spatial * ((x as f64 - l[0]).powi(2) + (y as f64 - l[1]).powi(2));
                    }
                }
                let best = d.iter().cloned().fold(f64::INFINITY, f64::min);
                for k in 0..NEIGHBORS {
                    if d[k].is_finite() {
                        scores.set(&[y, x, k], (-(d[k] - best) / temperature).exp());
                    }
                }
            }
        }
        assoc = AssociationMap::from_scores(scores, *grid)?;
    }
    AssociationMap::from_scores(assoc.into_probs().cast(), *grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::CENTER_CHANNEL;
    use crate::synthetic::{item_rng, voronoi_scene, MosaicConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_assoc(g: GridSpec, rng: &mut ChaCha8Rng) -> AssociationMap<f64> {
        AssociationMap::from_scores(Tensor::from_fn(&[g.height, g.width, 9], |_| rng.random_range(0.0..1.0)), g).unwrap()
    }

    #[test]
    fn constant_maps_stay_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = GridSpec::new(12, 12, 4).unwrap();
        let a = random_assoc(g, &mut rng);
        let low = downsample(&a, &Tensor::full(&[12, 12, 2], 3.0)).unwrap();
        assert!(low.data().iter().all(|v| (v - 3.0).abs() < 1e-12));
        let up = upsample(&a, &Tensor::full(&[3, 3, 1], -1.5)).unwrap();
        assert!(up.data().iter().all(|v| (v + 1.5).abs() < 1e-12));
    }

    #[test]
    fn hard_map_block_means_and_exact_round_trip() {
        let g = GridSpec::new(8, 8, 4).unwrap();
        let hard = AssociationMap::<f64>::owning(g);
        let f = Tensor::from_fn(&[8, 8, 1], |i| (i[0] * 8 + i[1]) as f64);
        let low = downsample(&hard, &f).unwrap();
        assert_eq!(low.at(&[0, 0, 0]), (0..4).flat_map(|y| (0..4).map(move |x| (y * 8 + x) as f64)).sum::<f64>() / 16.0);
        let piecewise = Tensor::from_fn(&[8, 8, 1], |i| ((i[0] / 4) * 2 + i[1] / 4) as f64 * 7.0);
        assert_eq!(upsample(&hard, &downsample(&hard, &piecewise).unwrap()).unwrap(), piecewise);
    }

    #[test]
    fn upsample_matches_nine_term_oracle_and_is_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = GridSpec::new(10, 9, 3).unwrap();
        let a = random_assoc(g, &mut rng);
        let low = Tensor::from_fn(&[4, 3, 2], |_| rng.random_range(-5.0..5.0));
        let up = upsample(&a, &low).unwrap();
        for y in 0..10 {
            for x in 0..9 {
                for ch in 0..2 {
                    let (mut v, mut lo, mut hi) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
                    for k in 0..9 {
                        if let Some(s) = g.neighbor(x, y, k) {
                            let cell = low.data()[s * 2 + ch];
                            v += a.pixel(x, y)[k] * cell;
                            lo = lo.min(cell);
                            hi = hi.max(cell);
                        }
                    }
                    let got = up.at(&[y, x, ch]);
                    assert!((got - v).abs() < 1e-9);
                    assert!(got >= lo - 1e-12 && got <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn bilinear_baseline_contract() {
        let low = Tensor::from_fn(&[2, 3, 1], |i| (i[0] + i[1]) as f64);
        assert_eq!(bilinear_upsample(&low, 2, 3).unwrap(), low);
        assert!(bilinear_upsample(&low, 1, 3).is_err());
    }

    #[test]
    fn edge_score_contract() {
        let gt = Tensor::from_fn(&[4, 4, 1], |i| i[1] as f64);
        let all = vec![true; 16];
        assert_eq!(edge_preservation_score(&gt, &gt, &all).unwrap(), 0.0);
        let shifted = gt.map(|v| v + 0.5);
        assert_eq!(edge_preservation_score(&gt, &shifted, &all).unwrap(), 0.5);
        assert!(edge_preservation_score(&gt, &gt, &[false; 16]).is_err());
    }

    #[test]
    fn color_association_is_valid_and_follows_regions() {
        let scene = voronoi_scene::<f64>(&mut item_rng(2, 0), &MosaicConfig::default()).unwrap();
        let lab = crate::color::rgb_to_lab(&scene.image).unwrap().values;
        let g = GridSpec::new(64, 64, 8).unwrap();
        let a = soft_color_association(&lab, &g, 10.0, 20.0, 3).unwrap();
        a.validate(1e-6).unwrap();
        assert!(a.probs().data().chunks(9).any(|p| p[CENTER_CHANNEL] < 0.5));
        let (ours, base) = compare_upsamplers(&a, &scene.disparity, &scene.labels).unwrap();
        assert!(ours < base, "{ours} vs {base}");
    }
}
