//! Seeded synthetic scenes: Voronoi color mosaics with known segment maps
//! and matching piecewise-constant disparity.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::io::{write_image, write_labels, DatasetManifest, ManifestEntry};
use crate::scalar::Scalar;
use crate::segmentation::LabelMap;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MosaicConfig {
    pub height: usize,
    pub width: usize,
    pub min_regions: usize,
    pub max_regions: usize,
    /// Standard deviation of additive Gaussian noise on colors.
    pub noise: f64,
    /// Minimum L1 distance between any two region colors.
    pub min_color_distance: f64,
    /// Disparity values are drawn from `[0, max_disparity)`.
    pub max_disparity: f64,
}

impl Default for MosaicConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            min_regions: 8,
            max_regions: 15,
            noise: 0.0,
            min_color_distance: 0.3,
            max_disparity: 64.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene<T> {
    /// `[H, W, 3]` sRGB quantized to 8 bits.
    pub image: Tensor<T>,
    pub labels: LabelMap,
    /// `[H, W, 1]`, constant within each region.
    pub disparity: Tensor<T>,
}

/// Independent, reproducible RNG for item `index` of a seeded collection.
pub fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn voronoi_scene<T: Scalar>(rng: &mut impl Rng, cfg: &MosaicConfig) -> Result<Scene<T>> {
    if cfg.min_regions == 0 || cfg.min_regions > cfg.max_regions || cfg.height == 0 || cfg.width == 0 {
        return invalid(format!("bad mosaic configuration {cfg:?}"));
    }
    let n = rng.random_range(cfg.min_regions..=cfg.max_regions);
    let sites: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.random_range(0.0..cfg.width as f64), rng.random_range(0.0..cfg.height as f64)))
        .collect();
    let mut colors: Vec<[f64; 3]> = Vec::with_capacity(n);
    while colors.len() < n {
        let c = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        // give up on spacing after many draws rather than loop forever
        let spaced = colors
            .iter()
            .all(|o| o.iter().zip(&c).map(|(a, b)| (a - b).abs()).sum::<f64>() >= cfg.min_color_distance);
        if spaced || rng.random_ratio(1, 200) {
            colors.push(c);
        }
    }
    let disp: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..cfg.max_disparity)).collect();

    let raw = LabelMap::from_fn(cfg.width, cfg.height, |x, y| {
        let mut best = (f64::INFINITY, 0);
        for (i, &(sx, sy)) in sites.iter().enumerate() {
            let d = (x as f64 - sx).powi(2) + (y as f64 - sy).powi(2);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1 as u32
    });
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| crate::Error::InvalidArgument(e.to_string()))?;
    let image = Tensor::from_fn(&[cfg.height, cfg.width, 3], |i| {
        let base = colors[raw.get(i[1], i[0]) as usize][i[2]];
        let v = if cfg.noise > 0.0 { base + noise.sample(rng) } else { base };
        T::of((v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
    });
    let disparity = Tensor::from_fn(&[cfg.height, cfg.width, 1], |i| T::of(disp[raw.get(i[1], i[0]) as usize]));
    Ok(Scene { image, labels: raw.compacted(), disparity })
}

/// `count` scenes, scene `i` drawn from [`item_rng`]`(seed, i)`.
pub fn corpus<T: Scalar>(seed: u64, count: usize, cfg: &MosaicConfig) -> Result<Vec<Scene<T>>> {
    (0..count).map(|i| voronoi_scene(&mut item_rng(seed, i as u64), cfg)).collect()
}

/// Writes `NAME_####.ppm` / `.pgm` pairs and a `manifest.txt` with relative
/// paths into `dir`.
pub fn write_corpus<T: Scalar>(dir: &Path, prefix: &str, scenes: &[Scene<T>]) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = DatasetManifest::default();
    let mut rel = DatasetManifest::default();
    for (i, s) in scenes.iter().enumerate() {
        let (img, lab) = (format!("{prefix}_{i:04}.ppm"), format!("{prefix}_{i:04}.pgm"));
        write_image(dir.join(&img), &s.image)?;
        write_labels(dir.join(&lab), &s.labels)?;
        rel.entries.push(ManifestEntry { image: img.clone().into(), labels: Some(lab.clone().into()) });
        manifest.entries.push(ManifestEntry { image: dir.join(img), labels: Some(dir.join(lab)) });
    }
    std::fs::write(dir.join("manifest.txt"), rel.render())?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::components;

    #[test]
    fn scenes_respect_configuration() {
        let cfg = MosaicConfig::default();
        for s in corpus::<f32>(11, 20, &cfg).unwrap() {
            let n = s.labels.n_labels();
            assert!((1..=15).contains(&n));
            assert_eq!(s.image.shape(), &[64, 64, 3]);
            assert!(s.labels.is_compact());
            // colors and disparity are constant per region
            for p in 0..s.labels.len() {
                let q = s.labels.labels.iter().position(|&l| l == s.labels.labels[p]).unwrap();
                assert_eq!(s.image.data()[p * 3..p * 3 + 3], s.image.data()[q * 3..q * 3 + 3]);
                assert_eq!(s.disparity.data()[p], s.disparity.data()[q]);
            }
        }
    }

    #[test]
    fn regions_are_connected_cells() {
        let s = voronoi_scene::<f64>(&mut item_rng(3, 0), &MosaicConfig::default()).unwrap();
        assert_eq!(components(&s.labels).1.len(), s.labels.n_labels());
    }

    #[test]
    fn seeded_and_distinct() {
        let cfg = MosaicConfig { noise: 0.02, ..MosaicConfig::default() };
        let a = corpus::<f32>(5, 3, &cfg).unwrap();
        assert_eq!(a, corpus::<f32>(5, 3, &cfg).unwrap());
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn corpus_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = corpus::<f32>(1, 2, &MosaicConfig::default()).unwrap();
        write_corpus(dir.path(), "img", &scenes).unwrap();
        let m = DatasetManifest::load(dir.path().join("manifest.txt")).unwrap();
        assert_eq!(m.entries.len(), 2);
        let back: Tensor<f32> = crate::io::read_image(&m.entries[1].image).unwrap();
        assert_eq!(back, scenes[1].image);
    }
}
