//! Regular seed grid, the 9-cell pixel neighborhood, superpixel centers and
//! pixel reconstruction.
//!
//! Pixel coordinates are integer `(x, y) = (column, row)`. A pixel's owning
//! cell is `(y / S, x / S)`; its candidate cells are the 3x3 block of cells
//! around the owning one, ordered row-major by offset `(di, dj)` in
//! `{-1, 0, 1}^2`. Channel 4 is always the owning cell.

use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NEIGHBORS: usize = 9;

/// Row-major `(row, column)` cell offsets, one per association channel.
pub const OFFSETS: [(isize, isize); NEIGHBORS] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Channel index of the owning cell.
pub const CENTER_CHANNEL: usize = 4;

/// Below this total association mass a cell is treated as empty.
pub const DEGENERATE_MASS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub cell_size: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl GridSpec {
    pub fn new(height: usize, width: usize, cell_size: usize) -> Result<Self> {
        if cell_size < 2 {
            return invalid(format!("cell size must be at least 2, got {cell_size}"));
        }
        if height == 0 || width == 0 {
            return invalid("image must be non-empty");
        }
        Ok(Self {
            height,
            width,
            cell_size,
            grid_h: height.div_ceil(cell_size),
            grid_w: width.div_ceil(cell_size),
        })
    }

    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn n_cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// `(row, col)` of the cell containing pixel `(x, y)`.
    #[inline]
    pub fn owning_cell(&self, x: usize, y: usize) -> (usize, usize) {
        (y / self.cell_size, x / self.cell_size)
    }

    /// Flat index of the `k`-th candidate cell of pixel `(x, y)`, if on-grid.
    #[inline]
    pub fn neighbor(&self, x: usize, y: usize, k: usize) -> Option<usize> {
        let (r, c) = self.owning_cell(x, y);
        let (di, dj) = OFFSETS[k];
        let (nr, nc) = (r as isize + di, c as isize + dj);
        if nr < 0 || nc < 0 || nr >= self.grid_h as isize || nc >= self.grid_w as isize {
            None
        } else {
            Some(nr as usize * self.grid_w + nc as usize)
        }
    }

    /// Candidate cells of pixel `(x, y)` as `(row, col)`, `None` for off-grid.
    pub fn neighborhood(&self, x: usize, y: usize) -> Result<[Option<(usize, usize)>; NEIGHBORS]> {
        if x >= self.width || y >= self.height {
            return invalid(format!(
                "pixel ({x}, {y}) outside {}x{} image",
                self.width, self.height
            ));
        }
        let mut out = [None; NEIGHBORS];
        for (k, slot) in out.iter_mut().enumerate() {
            *slot = self.neighbor(x, y, k).map(|i| (i / self.grid_w, i % self.grid_w));
        }
        Ok(out)
    }

    /// `[H, W, 9]` mask with 1 for on-grid candidate cells.
    pub fn validity<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.height, self.width, NEIGHBORS], |i| {
            if self.neighbor(i[1], i[0], i[2]).is_some() {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// `[H, W, 2]` map of pixel coordinates `(x, y)`.
    pub fn coordinates<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.height, self.width, 2], |i| {
            T::of(if i[2] == 0 { i[1] } else { i[0] } as f64)
        })
    }

    /// Half-open pixel bounds `(y0, y1, x0, x1)` of cell `(row, col)`.
    pub fn cell_bounds(&self, row: usize, col: usize) -> (usize, usize, usize, usize) {
        let s = self.cell_size;
        (row * s, ((row + 1) * s).min(self.height), col * s, ((col + 1) * s).min(self.width))
    }
}

/// Per-pixel probability distribution over the 9 candidate cells.
#[derive(Clone, Debug, PartialEq)]
pub struct AssociationMap<T> {
    probs: Tensor<T>,
    grid: GridSpec,
}

impl<T: Scalar> AssociationMap<T> {
    /// Wraps `[H, W, 9]` probabilities after checking the invariants.
    pub fn new(probs: Tensor<T>, grid: GridSpec) -> Result<Self> {
        let map = Self::new_unchecked(probs, grid)?;
        map.validate(1e-5)?;
        Ok(map)
    }

    pub(crate) fn new_unchecked(probs: Tensor<T>, grid: GridSpec) -> Result<Self> {
        if probs.shape() != [grid.height, grid.width, NEIGHBORS] {
            return shape_err(format!(
                "association map must be [{}, {}, 9], got {:?}",
                grid.height,
                grid.width,
                probs.shape()
            ));
        }
        Ok(Self { probs, grid })
    }

    /// Zeroes off-grid channels of non-negative scores and renormalizes each
    /// pixel to sum to one.
    pub fn from_scores(scores: Tensor<T>, grid: GridSpec) -> Result<Self> {
        let mut map = Self::new_unchecked(scores, grid)?;
        let (h, w) = (grid.height, grid.width);
        let data = map.probs.data_mut();
        for y in 0..h {
            for x in 0..w {
                let px = &mut data[(y * w + x) * NEIGHBORS..(y * w + x + 1) * NEIGHBORS];
                let mut total = T::zero();
                for (k, v) in px.iter_mut().enumerate() {
                    if grid.neighbor(x, y, k).is_none() || *v < T::zero() {
                        *v = T::zero();
                    }
                    total += *v;
                }
                if total > T::zero() {
                    px.iter_mut().for_each(|v| *v /= total);
                } else {
                    px.fill(T::zero());
                    px[CENTER_CHANNEL] = T::one();
                }
            }
        }
        Ok(map)
    }

    /// `[N, 9, H, W]` (N = 1) or `[9, H, W]` channel-first probabilities.
    pub fn from_channels_first(t: &Tensor<T>, grid: GridSpec) -> Result<Self> {
        let t = match t.ndim() {
            3 => t.clone().reshape(&[1, t.shape()[0], t.shape()[1], t.shape()[2]])?,
            _ => t.clone(),
        };
        let (n, c, _, _) = t.dims4()?;
        if n != 1 || c != NEIGHBORS {
            return shape_err(format!("expected [1, 9, H, W], got {:?}", t.shape()));
        }
        let last = t.to_channels_last()?;
        let shape = last.shape()[1..].to_vec();
        Self::from_scores(last.reshape(&shape)?, grid)
    }

    /// Every pixel fully assigned to its owning cell.
    pub fn owning(grid: GridSpec) -> Self {
        let probs = Tensor::from_fn(&[grid.height, grid.width, NEIGHBORS], |i| {
            if i[2] == CENTER_CHANNEL {
                T::one()
            } else {
                T::zero()
            }
        });
        Self { probs, grid }
    }

    /// Equal mass on every valid candidate cell.
    pub fn uniform(grid: GridSpec) -> Self {
        Self::from_scores(grid.validity(), grid).expect("validity mask has grid shape")
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn probs(&self) -> &Tensor<T> {
        &self.probs
    }

    pub fn into_probs(self) -> Tensor<T> {
        self.probs
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[T] {
        let o = (y * self.grid.width + x) * NEIGHBORS;
        &self.probs.data()[o..o + NEIGHBORS]
    }

    /// Checks probabilities are in `[0, 1]`, off-grid channels are exactly
    /// zero and each pixel sums to one within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let g = &self.grid;
        for y in 0..g.height {
            for x in 0..g.width {
                let mut sum = 0.0;
                for (k, &v) in self.pixel(x, y).iter().enumerate() {
                    let v = v.to_f64().unwrap_or(f64::NAN);
                    if !(0.0..=1.0).contains(&v) {
                        return invalid(format!("probability {v} at ({x}, {y}, {k}) outside [0, 1]"));
                    }
                    if g.neighbor(x, y, k).is_none() && v != 0.0 {
                        return invalid(format!("off-grid channel {k} of ({x}, {y}) has mass {v}"));
                    }
                    sum += v;
                }
                if (sum - 1.0).abs() > tol {
                    return invalid(format!("pixel ({x}, {y}) sums to {sum}"));
                }
            }
        }
        Ok(())
    }
}

/// Superpixel centers: property vectors `[h, w, C]` and locations `[h, w, 2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterMap<T> {
    pub properties: Tensor<T>,
    pub locations: Tensor<T>,
    /// Cells that received no association mass and fell back to their
    /// owned-pixel average.
    pub degenerate: Vec<bool>,
}

fn check_features<T: Scalar>(grid: &GridSpec, features: &Tensor<T>) -> Result<usize> {
    let (h, w, c) = features.dims3()?;
    if (h, w) != (grid.height, grid.width) {
        return shape_err(format!(
            "features are {h}x{w} but the grid covers {}x{}",
            grid.height, grid.width
        ));
    }
    Ok(c)
}

/// Q-weighted mean of pixel features (and positions) for every cell.
pub fn compute_centers<T: Scalar>(assoc: &AssociationMap<T>, features: &Tensor<T>) -> Result<CenterMap<T>> {
    let grid = assoc.grid;
    let c = check_features(&grid, features)?;
    let (props, mass) = kernels::centers_forward(&grid, assoc.probs.data(), features.data(), c);
    let coords = grid.coordinates::<T>();
    let (locs, _) = kernels::centers_forward(&grid, assoc.probs.data(), coords.data(), 2);
    Ok(CenterMap {
        properties: Tensor::new(&[grid.grid_h, grid.grid_w, c], props)?,
        locations: Tensor::new(&[grid.grid_h, grid.grid_w, 2], locs)?,
        degenerate: mass.iter().map(|m| m.to_f64().unwrap_or(0.0) < DEGENERATE_MASS).collect(),
    })
}

/// Per-pixel Q-weighted combination of the candidate cells' values.
pub fn reconstruct_values<T: Scalar>(assoc: &AssociationMap<T>, cell_values: &Tensor<T>) -> Result<Tensor<T>> {
    let grid = assoc.grid;
    let (gh, gw, c) = cell_values.dims3()?;
    if (gh, gw) != (grid.grid_h, grid.grid_w) {
        return shape_err(format!(
            "cell map is {gh}x{gw} but the grid is {}x{}",
            grid.grid_h, grid.grid_w
        ));
    }
    let out = kernels::reconstruct_forward(&grid, assoc.probs.data(), cell_values.data(), c);
    Tensor::new(&[grid.height, grid.width, c], out)
}

/// Reconstructed pixel features and positions from the centers.
pub fn reconstruct<T: Scalar>(assoc: &AssociationMap<T>, centers: &CenterMap<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((
        reconstruct_values(assoc, &centers.properties)?,
        reconstruct_values(assoc, &centers.locations)?,
    ))
}

/// Normalized `3S x 3S` gather kernel of cell `(row, col)`.
///
/// Entry `(a, b)` weighs pixel `((row - 1) S + a, (col - 1) S + b)`; entries
/// outside the image are zero. Returns `None` for an empty cell.
pub fn csp_kernel<T: Scalar>(assoc: &AssociationMap<T>, row: usize, col: usize) -> Option<Tensor<T>> {
    let g = &assoc.grid;
    let s = g.cell_size;
    let side = 3 * s;
    let mut kernel = Tensor::zeros(&[side, side]);
    let mut total = T::zero();
    for a in 0..side {
        let Some(y) = (row * s + a).checked_sub(s).filter(|&y| y < g.height) else {
            continue;
        };
        for b in 0..side {
            let Some(x) = (col * s + b).checked_sub(s).filter(|&x| x < g.width) else {
                continue;
            };
            let (ry, rx) = g.owning_cell(x, y);
            let di = row as isize - ry as isize;
            let dj = col as isize - rx as isize;
            let k = ((di + 1) * 3 + (dj + 1)) as usize;
            let q = assoc.pixel(x, y)[k];
            kernel.set(&[a, b], q);
            total += q;
        }
    }
    if total.to_f64().unwrap_or(0.0) < DEGENERATE_MASS {
        return None;
    }
    Some(kernel.map(|v| v / total))
}

/// Centers computed cell-by-cell as a windowed convolution with the
/// normalized kernel from [`csp_kernel`]. Agrees with [`compute_centers`].
pub fn csp_centers<T: Scalar>(assoc: &AssociationMap<T>, features: &Tensor<T>) -> Result<CenterMap<T>> {
    let g = assoc.grid;
    let c = check_features(&g, features)?;
    let s = g.cell_size;
    let side = 3 * s;
    let coords = g.coordinates::<T>();
    let mut props = Tensor::zeros(&[g.grid_h, g.grid_w, c]);
    let mut locs = Tensor::zeros(&[g.grid_h, g.grid_w, 2]);
    let mut degenerate = vec![false; g.n_cells()];
    for row in 0..g.grid_h {
        for col in 0..g.grid_w {
            let cell = row * g.grid_w + col;
            let Some(kernel) = csp_kernel(assoc, row, col) else {
                degenerate[cell] = true;
                let (p, l) = owned_average(&g, row, col, features.data(), coords.data(), c);
                props.data_mut()[cell * c..(cell + 1) * c].copy_from_slice(&p);
                locs.data_mut()[cell * 2..(cell + 1) * 2].copy_from_slice(&l);
                continue;
            };
            let mut acc = vec![T::zero(); c];
            let mut loc = [T::zero(); 2];
            for a in 0..side {
                for b in 0..side {
                    let wgt = kernel.at(&[a, b]);
                    if wgt == T::zero() {
                        continue;
                    }
                    let (y, x) = (row * s + a - s, col * s + b - s);
                    let p = y * g.width + x;
                    for ch in 0..c {
                        acc[ch] += wgt * features.data()[p * c + ch];
                    }
                    loc[0] += wgt * T::of(x as f64);
                    loc[1] += wgt * T::of(y as f64);
                }
            }
            props.data_mut()[cell * c..(cell + 1) * c].copy_from_slice(&acc);
            locs.data_mut()[cell * 2..(cell + 1) * 2].copy_from_slice(&loc);
        }
    }
    Ok(CenterMap { properties: props, locations: locs, degenerate })
}

fn owned_average<T: Scalar>(
    g: &GridSpec,
    row: usize,
    col: usize,
    features: &[T],
    coords: &[T],
    c: usize,
) -> (Vec<T>, [T; 2]) {
    let (y0, y1, x0, x1) = g.cell_bounds(row, col);
    let n = T::of(((y1 - y0) * (x1 - x0)) as f64);
    let mut p = vec![T::zero(); c];
    let mut l = [T::zero(); 2];
    for y in y0..y1 {
        for x in x0..x1 {
            let i = y * g.width + x;
            for ch in 0..c {
                p[ch] += features[i * c + ch];
            }
            l[0] += coords[i * 2];
            l[1] += coords[i * 2 + 1];
        }
    }
    p.iter_mut().for_each(|v| *v /= n);
    l.iter_mut().for_each(|v| *v /= n);
    (p, l)
}

/// Single-image slice kernels shared by the eager functions above and the
/// differentiable graph operators. Layouts: `q [H*W*9]`, features
/// `[H*W*C]`, cell values `[h*w*C]`.
pub(crate) mod kernels {
    use super::*;

    /// Returns the centers and the per-cell association mass.
    pub fn centers_forward<T: Scalar>(g: &GridSpec, q: &[T], f: &[T], c: usize) -> (Vec<T>, Vec<T>) {
        let mut num = vec![T::zero(); g.n_cells() * c];
        let mut den = vec![T::zero(); g.n_cells()];
        for y in 0..g.height {
            for x in 0..g.width {
                let p = y * g.width + x;
                let fp = &f[p * c..(p + 1) * c];
                for k in 0..NEIGHBORS {
                    let Some(s) = g.neighbor(x, y, k) else { continue };
                    let w = q[p * NEIGHBORS + k];
                    den[s] += w;
                    for (acc, &v) in num[s * c..(s + 1) * c].iter_mut().zip(fp) {
                        *acc += w * v;
                    }
                }
            }
        }
        for s in 0..g.n_cells() {
            let out = &mut num[s * c..(s + 1) * c];
            if den[s].to_f64().unwrap_or(0.0) < DEGENERATE_MASS {
                let (row, col) = (s / g.grid_w, s % g.grid_w);
                let (y0, y1, x0, x1) = g.cell_bounds(row, col);
                let n = T::of(((y1 - y0) * (x1 - x0)) as f64);
                out.fill(T::zero());
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = y * g.width + x;
                        for (o, &v) in out.iter_mut().zip(&f[p * c..(p + 1) * c]) {
                            *o += v;
                        }
                    }
                }
                out.iter_mut().for_each(|v| *v /= n);
            } else {
                // divide rather than scale by 1/den so hard maps round-trip exactly
                out.iter_mut().for_each(|v| *v /= den[s]);
            }
        }
        (num, den)
    }

    /// Gradients of [`centers_forward`] w.r.t. `q` and `f`.
    #[allow(clippy::too_many_arguments)]
    pub fn centers_backward<T: Scalar>(
        g: &GridSpec,
        q: &[T],
        c: usize,
        f: &[T],
        centers: &[T],
        mass: &[T],
        grad: &[T],
        dq: &mut [T],
        df: &mut [T],
    ) {
        // u_s = num_s / den_s: d num_s = du_s / den_s, d den_s = -<du_s, u_s> / den_s.
        let n_cells = g.n_cells();
        let mut dnum = vec![T::zero(); n_cells * c];
        let mut dden = vec![T::zero(); n_cells];
        let mut degenerate_scale = vec![T::zero(); n_cells];
        for s in 0..n_cells {
            let du = &grad[s * c..(s + 1) * c];
            if mass[s].to_f64().unwrap_or(0.0) < DEGENERATE_MASS {
                let (y0, y1, x0, x1) = g.cell_bounds(s / g.grid_w, s % g.grid_w);
                degenerate_scale[s] = T::one() / T::of(((y1 - y0) * (x1 - x0)) as f64);
                continue;
            }
            let inv = T::one() / mass[s];
            let mut dot = T::zero();
            for ch in 0..c {
                dnum[s * c + ch] = du[ch] * inv;
                dot += du[ch] * centers[s * c + ch];
            }
            dden[s] = -dot * inv;
        }
        for y in 0..g.height {
            for x in 0..g.width {
                let p = y * g.width + x;
                let fp = &f[p * c..(p + 1) * c];
                for k in 0..NEIGHBORS {
                    let Some(s) = g.neighbor(x, y, k) else { continue };
                    if degenerate_scale[s] != T::zero() {
                        continue;
                    }
                    let w = q[p * NEIGHBORS + k];
                    let dn = &dnum[s * c..(s + 1) * c];
                    let mut acc = dden[s];
                    for ch in 0..c {
                        acc += dn[ch] * fp[ch];
                        df[p * c + ch] += w * dn[ch];
                    }
                    dq[p * NEIGHBORS + k] += acc;
                }
                let (row, col) = g.owning_cell(x, y);
                let own = row * g.grid_w + col;
                if degenerate_scale[own] != T::zero() {
                    for ch in 0..c {
                        df[p * c + ch] += grad[own * c + ch] * degenerate_scale[own];
                    }
                }
            }
        }
    }

    pub fn reconstruct_forward<T: Scalar>(g: &GridSpec, q: &[T], u: &[T], c: usize) -> Vec<T> {
        let mut out = vec![T::zero(); g.n_pixels() * c];
        for y in 0..g.height {
            for x in 0..g.width {
                let p = y * g.width + x;
                let dst = &mut out[p * c..(p + 1) * c];
                for k in 0..NEIGHBORS {
                    let Some(s) = g.neighbor(x, y, k) else { continue };
                    let w = q[p * NEIGHBORS + k];
                    for (o, &v) in dst.iter_mut().zip(&u[s * c..(s + 1) * c]) {
                        *o += w * v;
                    }
                }
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    pub fn reconstruct_backward<T: Scalar>(
        g: &GridSpec,
        q: &[T],
        u: &[T],
        c: usize,
        grad: &[T],
        dq: &mut [T],
        du: &mut [T],
    ) {
        for y in 0..g.height {
            for x in 0..g.width {
                let p = y * g.width + x;
                let gp = &grad[p * c..(p + 1) * c];
                for k in 0..NEIGHBORS {
                    let Some(s) = g.neighbor(x, y, k) else { continue };
                    let w = q[p * NEIGHBORS + k];
                    let mut acc = T::zero();
                    for ch in 0..c {
                        acc += gp[ch] * u[s * c + ch];
                        du[s * c + ch] += w * gp[ch];
                    }
                    dq[p * NEIGHBORS + k] += acc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_assoc(grid: GridSpec, rng: &mut ChaCha8Rng) -> AssociationMap<f64> {
        let scores = Tensor::from_fn(&[grid.height, grid.width, NEIGHBORS], |_| rng.random_range(0.01..1.0));
        AssociationMap::from_scores(scores, grid).unwrap()
    }

    #[test]
    fn neighborhood_interior_and_corner() {
        let g = GridSpec::new(32, 32, 4).unwrap();
        let n = g.neighborhood(13, 14).unwrap(); // owning cell (3, 3)
        assert!(n.iter().all(|c| c.is_some()));
        let cells: Vec<_> = n.iter().map(|c| c.unwrap()).collect();
        assert_eq!(cells[0], (2, 2));
        assert_eq!(cells[8], (4, 4));
        let corner = g.neighborhood(0, 0).unwrap();
        assert_eq!(corner.iter().filter(|c| c.is_some()).count(), 4);
        assert!(g.neighborhood(32, 0).is_err());
    }

    #[test]
    fn neighborhood_is_local_exhaustively() {
        let g = GridSpec::new(6, 6, 2).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                let own = (y / 2, x / 2);
                for cell in g.neighborhood(x, y).unwrap().into_iter().flatten() {
                    assert!(cell.0.abs_diff(own.0) <= 1 && cell.1.abs_diff(own.1) <= 1);
                }
            }
        }
    }

    #[test]
    fn partial_cells_round_up() {
        let g = GridSpec::new(10, 7, 4).unwrap();
        assert_eq!((g.grid_h, g.grid_w), (3, 2));
        assert_eq!(g.cell_bounds(2, 1), (8, 10, 4, 7));
        assert!(GridSpec::new(8, 8, 1).is_err());
    }

    #[test]
    fn from_scores_masks_border_channels() {
        let g = GridSpec::new(4, 4, 2).unwrap();
        let a = AssociationMap::from_scores(Tensor::<f64>::full(&[4, 4, 9], 1.0), g).unwrap();
        a.validate(1e-12).unwrap();
        assert_eq!(a.pixel(0, 0)[0], 0.0);
        assert!((a.pixel(0, 0)[4] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn constant_features_give_constant_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = GridSpec::new(6, 6, 2).unwrap();
        let a = random_assoc(g, &mut rng);
        let f = Tensor::full(&[6, 6, 3], 0.7);
        let c = compute_centers(&a, &f).unwrap();
        assert!(c.properties.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
        let (rec, _) = reconstruct(&a, &c).unwrap();
        assert!(rec.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn hard_assignment_gives_block_means_and_centroids() {
        let g = GridSpec::new(4, 4, 2).unwrap();
        let a = AssociationMap::<f64>::owning(g);
        let f = Tensor::from_fn(&[4, 4, 1], |i| (i[0] * 4 + i[1]) as f64);
        let c = compute_centers(&a, &f).unwrap();
        // block (0, 0) holds 0, 1, 4, 5
        assert_eq!(c.properties.data(), &[2.5, 4.5, 10.5, 12.5]);
        assert_eq!(c.locations.at(&[1, 0, 0]), 0.5);
        assert_eq!(c.locations.at(&[1, 0, 1]), 2.5);
    }

    #[test]
    fn hard_assignment_reconstructs_cellwise_constant_input() {
        let g = GridSpec::new(6, 6, 3).unwrap();
        let a = AssociationMap::<f64>::owning(g);
        let f = Tensor::from_fn(&[6, 6, 2], |i| ((i[0] / 3) * 7 + (i[1] / 3) * 3 + i[2]) as f64);
        let c = compute_centers(&a, &f).unwrap();
        let (rec, _) = reconstruct(&a, &c).unwrap();
        assert_eq!(rec, f);
    }

    #[test]
    fn centers_match_direct_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = GridSpec::new(6, 6, 2).unwrap();
        let a = random_assoc(g, &mut rng);
        let f = Tensor::from_fn(&[6, 6, 3], |_| rng.random_range(-1.0..1.0));
        let got = compute_centers(&a, &f).unwrap();
        for row in 0..3 {
            for col in 0..3 {
                let (mut num, mut den, mut lx, mut ly) = ([0.0; 3], 0.0, 0.0, 0.0);
                for y in 0..6usize {
                    for x in 0..6usize {
                        let (ry, rx) = (y / 2, x / 2);
                        if ry.abs_diff(row) > 1 || rx.abs_diff(col) > 1 {
                            continue;
                        }
                        let k = ((row as isize - ry as isize + 1) * 3 + (col as isize - rx as isize + 1)) as usize;
                        let q = a.pixel(x, y)[k];
                        for ch in 0..3 {
                            num[ch] += q * f.at(&[y, x, ch]);
                        }
                        den += q;
                        lx += q * x as f64;
                        ly += q * y as f64;
                    }
                }
                for ch in 0..3 {
                    assert!((got.properties.at(&[row, col, ch]) - num[ch] / den).abs() < 1e-12);
                }
                assert!((got.locations.at(&[row, col, 0]) - lx / den).abs() < 1e-12);
                assert!((got.locations.at(&[row, col, 1]) - ly / den).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reconstruction_matches_nine_term_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = GridSpec::new(6, 6, 2).unwrap();
        let a = random_assoc(g, &mut rng);
        let u = Tensor::from_fn(&[3, 3, 2], |_| rng.random_range(-1.0..1.0));
        let rec = reconstruct_values(&a, &u).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                for ch in 0..2 {
                    let mut want = 0.0;
                    for (k, cell) in g.neighborhood(x, y).unwrap().iter().enumerate() {
                        if let Some((r, c)) = cell {
                            want += a.pixel(x, y)[k] * u.at(&[*r, *c, ch]);
                        }
                    }
                    assert!((rec.at(&[y, x, ch]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn csp_equals_scatter_on_hard_and_random_maps() {
        let g = GridSpec::new(6, 6, 2).unwrap();
        let f = Tensor::from_fn(&[6, 6, 3], |i| (i[0] * 11 + i[1] * 3 + i[2]) as f64);
        let hard = AssociationMap::owning(g);
        assert_eq!(csp_centers(&hard, &f).unwrap(), compute_centers(&hard, &f).unwrap());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = GridSpec::new(12, 12, 4).unwrap();
        let a = random_assoc(g, &mut rng);
        let f = Tensor::from_fn(&[12, 12, 3], |_| rng.random_range(-1.0..1.0));
        let x = csp_centers(&a, &f).unwrap();
        let y = compute_centers(&a, &f).unwrap();
        for (p, q) in x.properties.data().iter().zip(y.properties.data()) {
            assert!((p - q).abs() < 1e-6);
        }
        for (p, q) in x.locations.data().iter().zip(y.locations.data()) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_map_yields_uniform_interior_kernel() {
        // cells 1..=3 of a 5x5 grid see no image border
        let g = GridSpec::new(20, 20, 4).unwrap();
        let a = AssociationMap::<f64>::uniform(g);
        let k = csp_kernel(&a, 2, 2).unwrap();
        let expect = 1.0 / 144.0;
        assert!(k.data().iter().all(|v| (v - expect).abs() < 1e-15));
    }

    #[test]
    fn empty_cell_falls_back_to_owned_average() {
        let g = GridSpec::new(4, 4, 2).unwrap();
        // every pixel goes to the cell to its right where possible, else stays
        let scores = Tensor::from_fn(&[4, 4, 9], |i| if (i[1] < 2 && i[2] == 5) || (i[1] >= 2 && i[2] == 4) { 1.0 } else { 0.0 });
        let a = AssociationMap::from_scores(scores, g).unwrap();
        let f = Tensor::from_fn(&[4, 4, 1], |i| i[1] as f64);
        let c = compute_centers(&a, &f).unwrap();
        assert!(c.degenerate[0] && c.degenerate[2]);
        assert_eq!(c.properties.at(&[0, 0, 0]), 0.5);
        assert_eq!(c.locations.at(&[0, 0, 0]), 0.5);
        assert_eq!(csp_centers(&a, &f).unwrap(), c);
    }
}
