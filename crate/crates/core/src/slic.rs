//! Classical SLIC: k-means over CIELAB color and position, each center
//! searching a `2S x 2S` window.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::segmentation::{enforce_connectivity, Connectivity, LabelMap};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlicConfig {
    pub n_superpixels: usize,
    /// Compactness: weight of spatial distance relative to color distance.
    pub m: f64,
    pub iterations: usize,
    pub perturb_seeds: bool,
    pub enforce_connectivity: bool,
}

impl SlicConfig {
    pub fn new(n_superpixels: usize) -> Self {
        Self { n_superpixels, m: 10.0, iterations: 10, perturb_seeds: true, enforce_connectivity: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlicOutput {
    pub labels: LabelMap,
    /// Summed squared assignment distance after seeding and after every
    /// iteration.
    pub costs: Vec<f64>,
    /// Number of clusters before connectivity enforcement.
    pub n_clusters: usize,
    /// Grid interval used for the search windows.
    pub step: f64,
}

/// Seed grid `(columns, rows)` with at most `k` cells: the largest product,
/// then the cell shape closest to square, then more columns.
pub fn seed_grid(height: usize, width: usize, k: usize) -> (usize, usize) {
    let mut best = (1, 1);
    let mut best_key = (0usize, f64::NEG_INFINITY);
    for kx in 1..=k.min(width) {
        let ky = (k / kx).min(height);
        if ky == 0 {
            continue;
        }
        let aspect = -((width as f64 / kx as f64) / (height as f64 / ky as f64)).ln().abs();
        let key = (kx * ky, aspect);
        if key.0 > best_key.0 || (key.0 == best_key.0 && key.1 >= best_key.1 - 1e-12) {
            best = (kx, ky);
            best_key = key;
        }
    }
    best
}

#[derive(Clone, Copy, Debug)]
struct Center {
    lab: [f64; 3],
    x: f64,
    y: f64,
}

pub fn slic<T: Scalar>(lab: &Tensor<T>, cfg: &SlicConfig) -> Result<SlicOutput> {
    let (h, w, c) = lab.dims3()?;
    if c != 3 {
        return invalid(format!("SLIC expects a 3-channel Lab image, got {c} channels"));
    }
    let n = h * w;
    if cfg.n_superpixels == 0 || cfg.n_superpixels > n {
        return invalid(format!("cannot make {} superpixels from {n} pixels", cfg.n_superpixels));
    }
    if cfg.iterations == 0 {
        return invalid("SLIC needs at least one iteration");
    }
    let px: Vec<[f64; 3]> = lab
        .data()
        .chunks_exact(3)
        .map(|p| [0, 1, 2].map(|i| p[i].to_f64().unwrap_or(0.0)))
        .collect();

    let (kx, ky) = seed_grid(h, w, cfg.n_superpixels);
    let k = kx * ky;
    let step = (n as f64 / k as f64).sqrt();
    let mut centers: Vec<Center> = Vec::with_capacity(k);
    for j in 0..ky {
        for i in 0..kx {
            let mut x = (((i as f64 + 0.5) * w as f64 / kx as f64) as usize).min(w - 1);
            let mut y = (((j as f64 + 0.5) * h as f64 / ky as f64) as usize).min(h - 1);
            if cfg.perturb_seeds {
                (x, y) = lowest_gradient(&px, w, h, x, y);
            }
            centers.push(Center { lab: px[y * w + x], x: x as f64, y: y as f64 });
        }
    }

    let spatial = (cfg.m / step).powi(2);
    let dist2 = |c: &Center, p: usize| {
        let (x, y) = ((p % w) as f64, (p / w) as f64);
        let l = px[p];
        let dc = (l[0] - c.lab[0]).powi(2) + (l[1] - c.lab[1]).powi(2) + (l[2] - c.lab[2]).powi(2);
        dc + spatial * ((x - c.x).powi(2) + (y - c.y).powi(2))
    };

    let mut labels = vec![usize::MAX; n];
    let mut best = vec![f64::INFINITY; n];
    let radius = step.ceil() as isize;
    let mut costs = Vec::with_capacity(cfg.iterations + 1);
    for iter in 0..=cfg.iterations {
        // assignment: each pixel keeps its current cluster unless a window
        // center is strictly closer
        for p in 0..n {
            if labels[p] != usize::MAX {
                best[p] = dist2(&centers[labels[p]], p);
            }
        }
        for (ci, ctr) in centers.iter().enumerate() {
            let (cx, cy) = (ctr.x.round() as isize, ctr.y.round() as isize);
            for y in (cy - radius).max(0)..(cy + radius + 1).min(h as isize) {
                for x in (cx - radius).max(0)..(cx + radius + 1).min(w as isize) {
                    let p = y as usize * w + x as usize;
                    let d = dist2(ctr, p);
                    if d < best[p] {
                        best[p] = d;
                        labels[p] = ci;
                    }
                }
            }
        }
        for p in 0..n {
            if labels[p] == usize::MAX {
                let (ci, d) = centers
                    .iter()
                    .enumerate()
                    .map(|(i, ctr)| (i, dist2(ctr, p)))
                    .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
                labels[p] = ci;
                best[p] = d;
            }
        }
        if iter == cfg.iterations {
            break;
        }
        // update
        let mut sums = vec![[0.0f64; 6]; k];
        for p in 0..n {
            let s = &mut sums[labels[p]];
            s[0] += px[p][0];
            s[1] += px[p][1];
            s[2] += px[p][2];
            s[3] += (p % w) as f64;
            s[4] += (p / w) as f64;
            s[5] += 1.0;
        }
        for (ctr, s) in centers.iter_mut().zip(&sums) {
            if s[5] > 0.0 {
                *ctr = Center { lab: [s[0] / s[5], s[1] / s[5], s[2] / s[5]], x: s[3] / s[5], y: s[4] / s[5] };
            }
        }
        costs.push((0..n).map(|p| dist2(&centers[labels[p]], p)).sum());
    }

    let raw = LabelMap { width: w, height: h, labels: labels.iter().map(|&l| l as u32).collect() };
    let n_clusters = raw.n_labels();
    let labels = if cfg.enforce_connectivity {
        enforce_connectivity(&raw, &Connectivity::new(step))
    } else {
        raw.compacted()
    };
    Ok(SlicOutput { labels, costs, n_clusters, step })
}

fn lowest_gradient(px: &[[f64; 3]], w: usize, h: usize, x: usize, y: usize) -> (usize, usize) {
    let grad = |x: usize, y: usize| {
        let at = |xx: usize, yy: usize| px[yy * w + xx];
        let d = |a: [f64; 3], b: [f64; 3]| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>();
        d(at((x + 1).min(w - 1), y), at(x.saturating_sub(1), y)) + d(at(x, (y + 1).min(h - 1)), at(x, y.saturating_sub(1)))
    };
    let mut best = (grad(x, y), x, y);
    for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
        for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
            let g = grad(nx, ny);
            if g < best.0 {
                best = (g, nx, ny);
            }
        }
    }
    (best.1, best.2)
}
