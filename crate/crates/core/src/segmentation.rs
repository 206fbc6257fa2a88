//! Hard label maps, connectivity enforcement and boundary overlays.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::grid::{AssociationMap, GridSpec, NEIGHBORS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Superpixel id per pixel, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != width * height {
            return shape_err(format!(
                "{} labels for a {width}x{height} image",
                labels.len()
            ));
        }
        Ok(Self { width, height, labels })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u32) -> Self {
        let labels = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self { width, height, labels }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of distinct ids.
    pub fn n_labels(&self) -> usize {
        self.labels.iter().collect::<BTreeSet<_>>().len()
    }

    pub fn max_label(&self) -> Option<u32> {
        self.labels.iter().copied().max()
    }

    /// Renumbers ids to `0..n` in order of first appearance.
    pub fn compacted(&self) -> Self {
        let mut map = HashMap::new();
        let labels = self
            .labels
            .iter()
            .map(|&l| {
                let next = map.len() as u32;
                *map.entry(l).or_insert(next)
            })
            .collect();
        Self { width: self.width, height: self.height, labels }
    }

    pub fn is_compact(&self) -> bool {
        self.max_label().is_none_or(|m| m as usize + 1 == self.n_labels())
    }

    pub fn same_dims(&self, other: &Self) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return shape_err(format!(
                "label maps differ in size: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            ));
        }
        Ok(())
    }

    /// True where a 4-neighbor inside the image carries a different id.
    pub fn boundary_mask(&self) -> Vec<bool> {
        let (w, h) = (self.width, self.height);
        let mut mask = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let l = self.get(x, y);
                mask[y * w + x] = (x > 0 && self.get(x - 1, y) != l)
                    || (x + 1 < w && self.get(x + 1, y) != l)
                    || (y > 0 && self.get(x, y - 1) != l)
                    || (y + 1 < h && self.get(x, y + 1) != l);
            }
        }
        mask
    }

    /// Nearest-neighbor resampling to another resolution.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        Self::from_fn(width, height, |x, y| {
            let sx = ((x * self.width) / width).min(self.width - 1);
            let sy = ((y * self.height) / height).min(self.height - 1);
            self.get(sx, sy)
        })
    }
}

/// Labels each pixel with the flat index of its most probable cell; ties go
/// to the lowest channel.
pub fn hard_assign<T: Scalar>(assoc: &AssociationMap<T>) -> LabelMap {
    let g = *assoc.grid();
    LabelMap::from_fn(g.width, g.height, |x, y| {
        let p = assoc.pixel(x, y);
        let mut best = None;
        for k in 0..NEIGHBORS {
            if let Some(cell) = g.neighbor(x, y, k) {
                if best.is_none_or(|(_, v)| p[k] > v) {
                    best = Some((cell, p[k]));
                }
            }
        }
        best.map(|(c, _)| c as u32).expect("owning cell is always on the grid")
    })
}

/// Counts pixels whose label, read as a flat cell index, is more than one
/// cell away from the pixel's owning cell.
pub fn locality_violations(labels: &LabelMap, grid: &GridSpec) -> usize {
    let mut bad = 0;
    for y in 0..labels.height {
        for x in 0..labels.width {
            let l = labels.get(x, y) as usize;
            let (r, c) = grid.owning_cell(x, y);
            let (lr, lc) = (l / grid.grid_w, l % grid.grid_w);
            if l >= grid.n_cells() || lr.abs_diff(r) > 1 || lc.abs_diff(c) > 1 {
                bad += 1;
            }
        }
    }
    bad
}

/// 4-connected components: a component id per pixel plus component sizes.
pub fn components(labels: &LabelMap) -> (Vec<u32>, Vec<usize>) {
    let (w, h) = (labels.width, labels.height);
    let mut comp = vec![u32::MAX; w * h];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if comp[start] != u32::MAX {
            continue;
        }
        let id = sizes.len() as u32;
        let l = labels.labels[start];
        comp[start] = id;
        stack.push(start);
        let mut size = 0;
        while let Some(p) = stack.pop() {
            size += 1;
            let (x, y) = (p % w, p / w);
            let mut visit = |q: usize| {
                if comp[q] == u32::MAX && labels.labels[q] == l {
                    comp[q] = id;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        sizes.push(size);
    }
    (comp, sizes)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Connectivity {
    /// Components smaller than this fraction of `cell_size^2` are merged.
    pub min_size_fraction: f64,
    pub cell_size: f64,
    /// When false, every fragment of a label other than its largest one is
    /// merged as well, so the output never has more labels than the input.
    pub keep_fragments: bool,
}

impl Connectivity {
    pub fn new(cell_size: f64) -> Self {
        Self { min_size_fraction: 0.25, cell_size, keep_fragments: true }
    }

    pub fn threshold(&self) -> f64 {
        self.min_size_fraction * self.cell_size * self.cell_size
    }
}

/// Merges undersized 4-connected components into the neighbor sharing the
/// longest boundary (ties to the smaller component id) and compacts the ids.
/// Every output label is a single 4-connected component.
pub fn enforce_connectivity(labels: &LabelMap, cfg: &Connectivity) -> LabelMap {
    let (w, h) = (labels.width, labels.height);
    let (comp, sizes) = components(labels);
    let n = sizes.len();
    if n <= 1 {
        return labels.compacted();
    }

    let mut adjacency: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); n];
    for y in 0..h {
        for x in 0..w {
            let a = comp[y * w + x] as usize;
            let mut link = |b: usize| {
                if a != b {
                    *adjacency[a].entry(b).or_default() += 1;
                    *adjacency[b].entry(a).or_default() += 1;
                }
            };
            if x + 1 < w {
                link(comp[y * w + x + 1] as usize);
            }
            if y + 1 < h {
                link(comp[(y + 1) * w + x] as usize);
            }
        }
    }

    let threshold = cfg.threshold();
    let mut size = sizes.clone();
    let mut undersized: Vec<bool> = size.iter().map(|&s| (s as f64) < threshold).collect();
    // fragments stay marked however much they absorb
    let mut fragment = vec![false; n];
    if !cfg.keep_fragments {
        let mut largest: HashMap<u32, usize> = HashMap::new();
        let first_pixel = first_pixels(&comp, n);
        for c in 0..n {
            let l = labels.labels[first_pixel[c]];
            let e = largest.entry(l).or_insert(c);
            if size[c] > size[*e] {
                *e = c;
            }
        }
        for c in 0..n {
            let l = labels.labels[first_pixel[c]];
            if largest[&l] != c {
                fragment[c] = true;
                undersized[c] = true;
            }
        }
    }

    // (size, id) queue of components still to merge
    let mut queue: BTreeSet<(usize, usize)> = (0..n).filter(|&c| undersized[c]).map(|c| (size[c], c)).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    while let Some((_, c)) = queue.pop_first() {
        let Some(target) = adjacency[c]
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&t, _)| t)
        else {
            continue;
        };
        parent[c] = target;
        let edges = std::mem::take(&mut adjacency[c]);
        for (nb, count) in edges {
            adjacency[nb].remove(&c);
            if nb != target {
                *adjacency[target].entry(nb).or_default() += count;
                *adjacency[nb].entry(target).or_default() += count;
            }
        }
        if undersized[target] {
            queue.remove(&(size[target], target));
        }
        size[target] += size[c];
        undersized[target] = fragment[target] || (undersized[target] && (size[target] as f64) < threshold);
        if undersized[target] {
            queue.insert((size[target], target));
        }
    }

    let root = |mut c: usize| {
        while parent[c] != c {
            c = parent[c];
        }
        c
    };
    let roots: Vec<usize> = (0..n).map(root).collect();
    LabelMap { width: w, height: h, labels: comp.iter().map(|&c| roots[c as usize] as u32).collect() }.compacted()
}

fn first_pixels(comp: &[u32], n: usize) -> Vec<usize> {
    let mut first = vec![usize::MAX; n];
    for (p, &c) in comp.iter().enumerate() {
        if first[c as usize] == usize::MAX {
            first[c as usize] = p;
        }
    }
    first
}

/// Recolors pixels on a label boundary. `image` is `[H, W, C]`.
pub fn overlay_boundaries<T: Scalar>(image: &Tensor<T>, labels: &LabelMap, color: &[T]) -> Result<Tensor<T>> {
    let (h, w, c) = image.dims3()?;
    if (h, w) != (labels.height, labels.width) || color.len() != c {
        return shape_err(format!(
            "overlay of {}x{} labels and color of {} channels on image {:?}",
            labels.width,
            labels.height,
            color.len(),
            image.shape()
        ));
    }
    let mut out = image.clone();
    for (p, on) in labels.boundary_mask().into_iter().enumerate() {
        if on {
            out.data_mut()[p * c..(p + 1) * c].copy_from_slice(color);
        }
    }
    Ok(out)
}
