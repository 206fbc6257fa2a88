//! Over-segmentation benchmark metrics: ASA, boundary recall/precision and
//! compactness, plus directory-level evaluation.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::io::read_labels;
use crate::segmentation::LabelMap;

/// Fraction of pixels labeled correctly when every superpixel takes its
/// majority ground-truth segment.
pub fn asa(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    pred.same_dims(gt)?;
    if pred.is_empty() {
        return invalid("ASA of an empty image");
    }
    let mut table: HashMap<(u32, u32), usize> = HashMap::new();
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        *table.entry((p, g)).or_default() += 1;
    }
    let mut best: HashMap<u32, usize> = HashMap::new();
    for (&(p, _), &n) in &table {
        let b = best.entry(p).or_default();
        *b = (*b).max(n);
    }
    Ok(best.values().sum::<usize>() as f64 / pred.len() as f64)
}

/// Boundary tolerance in pixels: 0.0025 of the image diagonal, rounded.
pub fn boundary_tolerance(height: usize, width: usize) -> usize {
    (0.0025 * ((height * height + width * width) as f64).sqrt()).round() as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryScores {
    pub recall: f64,
    pub precision: f64,
    /// The ground truth had no boundary pixels; recall was defined as 1.
    pub gt_empty: bool,
    /// The prediction had no boundary pixels; precision was defined as 1.
    pub pred_empty: bool,
}

/// Fraction of `from` boundary pixels with a `to` boundary pixel within
/// Chebyshev distance `tol`.
fn matched_fraction(from: &[bool], to: &[bool], w: usize, h: usize, tol: usize) -> Option<f64> {
    let total = from.iter().filter(|&&b| b).count();
    if total == 0 {
        return None;
    }
    let mut hit = 0;
    for y in 0..h {
        for x in 0..w {
            if !from[y * w + x] {
                continue;
            }
            let (y0, y1) = (y.saturating_sub(tol), (y + tol).min(h - 1));
            let (x0, x1) = (x.saturating_sub(tol), (x + tol).min(w - 1));
            if (y0..=y1).any(|yy| to[yy * w + x0..=yy * w + x1].iter().any(|&b| b)) {
                hit += 1;
            }
        }
    }
    Some(hit as f64 / total as f64)
}

pub fn boundary_recall_precision(pred: &LabelMap, gt: &LabelMap, tol: usize) -> Result<BoundaryScores> {
    pred.same_dims(gt)?;
    let (w, h) = (pred.width, pred.height);
    let (pb, gb) = (pred.boundary_mask(), gt.boundary_mask());
    let recall = matched_fraction(&gb, &pb, w, h, tol);
    let precision = matched_fraction(&pb, &gb, w, h, tol);
    Ok(BoundaryScores {
        recall: recall.unwrap_or(1.0),
        precision: precision.unwrap_or(1.0),
        gt_empty: recall.is_none(),
        pred_empty: precision.is_none(),
    })
}

/// Area-weighted isoperimetric quotient `min(1, 4 pi A / P^2)` where `P`
/// counts unit edges between a superpixel pixel and any other label or the
/// image border.
pub fn compactness(pred: &LabelMap) -> f64 {
    let (w, h) = (pred.width, pred.height);
    let mut area: BTreeMap<u32, usize> = BTreeMap::new();
    let mut perim: BTreeMap<u32, usize> = BTreeMap::new();
    for y in 0..h {
        for x in 0..w {
            let l = pred.get(x, y);
            *area.entry(l).or_default() += 1;
            let edges = [
                x == 0 || pred.get(x - 1, y) != l,
                x + 1 == w || pred.get(x + 1, y) != l,
                y == 0 || pred.get(x, y - 1) != l,
                y + 1 == h || pred.get(x, y + 1) != l,
            ];
            *perim.entry(l).or_default() += edges.iter().filter(|&&e| e).count();
        }
    }
    let n = pred.len() as f64;
    area.iter()
        .map(|(l, &a)| {
            let p = perim[l] as f64;
            let q = (4.0 * std::f64::consts::PI * a as f64 / (p * p)).min(1.0);
            a as f64 / n * q
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub asa: f64,
    pub br: f64,
    pub bp: f64,
    pub co: f64,
    pub n_superpixels: usize,
    pub tolerance_px: usize,
}

/// All metrics at the default tolerance for the image size.
pub fn evaluate(pred: &LabelMap, gt: &LabelMap) -> Result<MetricReport> {
    evaluate_with_tolerance(pred, gt, boundary_tolerance(pred.height, pred.width))
}

pub fn evaluate_with_tolerance(pred: &LabelMap, gt: &LabelMap, tol: usize) -> Result<MetricReport> {
    let b = boundary_recall_precision(pred, gt, tol)?;
    Ok(MetricReport {
        asa: asa(pred, gt)?,
        br: b.recall,
        bp: b.precision,
        co: compactness(pred),
        n_superpixels: pred.n_labels(),
        tolerance_px: tol,
    })
}

/// Per-image rows in file-name order plus stems present on only one side.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectoryReport {
    pub rows: Vec<(String, MetricReport)>,
    pub missing: Vec<String>,
}

pub const CSV_HEADER: &str = "image,n_superpixels,asa,br,bp,co,tolerance_px";

/// Superpixel counts are grouped to the nearest multiple of this width.
pub const BUCKET_WIDTH: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub n_images: usize,
    pub asa: f64,
    pub br: f64,
    pub bp: f64,
    pub co: f64,
}

fn mean_of<'a>(rows: impl Iterator<Item = &'a MetricReport>) -> Aggregate {
    let mut a = Aggregate { n_images: 0, asa: 0.0, br: 0.0, bp: 0.0, co: 0.0 };
    for r in rows {
        a.n_images += 1;
        a.asa += r.asa;
        a.br += r.br;
        a.bp += r.bp;
        a.co += r.co;
    }
    let n = a.n_images.max(1) as f64;
    Aggregate { asa: a.asa / n, br: a.br / n, bp: a.bp / n, co: a.co / n, ..a }
}

impl DirectoryReport {
    /// Means keyed by superpixel-count bucket.
    pub fn buckets(&self) -> BTreeMap<usize, Aggregate> {
        let mut groups: BTreeMap<usize, Vec<&MetricReport>> = BTreeMap::new();
        for (_, r) in &self.rows {
            let b = ((r.n_superpixels as f64 / BUCKET_WIDTH as f64).round() as usize) * BUCKET_WIDTH;
            groups.entry(b).or_default().push(r);
        }
        groups.into_iter().map(|(b, rs)| (b, mean_of(rs.into_iter()))).collect()
    }

    pub fn overall(&self) -> Aggregate {
        mean_of(self.rows.iter().map(|(_, r)| r))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{CSV_HEADER}").unwrap();
        for (name, r) in &self.rows {
            writeln!(
                s,
                "{name},{},{:.6},{:.6},{:.6},{:.6},{}",
                r.n_superpixels, r.asa, r.br, r.bp, r.co, r.tolerance_px
            )
            .unwrap();
        }
        writeln!(s).unwrap();
        writeln!(s, "bucket,n_images,asa,br,bp,co").unwrap();
        let line = |s: &mut String, key: &str, a: &Aggregate| {
            writeln!(s, "{key},{},{:.6},{:.6},{:.6},{:.6}", a.n_images, a.asa, a.br, a.bp, a.co).unwrap();
        };
        for (b, a) in self.buckets() {
            line(&mut s, &b.to_string(), &a);
        }
        line(&mut s, "all", &self.overall());
        s
    }
}

fn label_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "pgm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Evaluates every `.pgm` label file in `pred_dir` against the file with the
/// same stem in `gt_dir`. Images are processed on the current rayon pool and
/// reported in name order.
pub fn evaluate_directory(pred_dir: &Path, gt_dir: &Path) -> Result<DirectoryReport> {
    let preds = label_files(pred_dir)?;
    let gts = label_files(gt_dir)?;
    let pairs: Vec<(&String, &PathBuf, &PathBuf)> =
        preds.iter().filter_map(|(k, p)| gts.get(k).map(|g| (k, p, g))).collect();
    if pairs.is_empty() {
        return invalid(format!(
            "no matching label files between {} and {}",
            pred_dir.display(),
            gt_dir.display()
        ));
    }
    let missing = preds
        .keys()
        .filter(|k| !gts.contains_key(*k))
        .chain(gts.keys().filter(|k| !preds.contains_key(*k)))
        .cloned()
        .collect();
    let rows = pairs
        .par_iter()
        .map(|(name, p, g)| {
            let report = evaluate(&read_labels(p)?, &read_labels(g)?)?;
            Ok(((*name).clone(), report))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DirectoryReport { rows, missing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(w: usize, h: usize, k: u32, rng: &mut ChaCha8Rng) -> LabelMap {
        LabelMap::from_fn(w, h, |_, _| rng.random_range(0..k))
    }

    fn asa_oracle(p: &LabelMap, g: &LabelMap) -> f64 {
        let np = p.max_label().unwrap() as usize + 1;
        let ng = g.max_label().unwrap() as usize + 1;
        let mut t = vec![vec![0usize; ng]; np];
        for i in 0..p.len() {
            t[p.labels[i] as usize][g.labels[i] as usize] += 1;
        }
        t.iter().map(|r| *r.iter().max().unwrap()).sum::<usize>() as f64 / p.len() as f64
    }

    fn boundary_oracle(l: &LabelMap) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..l.height as isize {
            for x in 0..l.width as isize {
                let here = l.get(x as usize, y as usize);
                let diff = [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|(dx, dy)| {
                    let (nx, ny) = (x + dx, y + dy);
                    nx >= 0
                        && ny >= 0
                        && nx < l.width as isize
                        && ny < l.height as isize
                        && l.get(nx as usize, ny as usize) != here
                });
                if diff {
                    out.push((x as usize, y as usize));
                }
            }
        }
        out
    }

    fn match_oracle(a: &[(usize, usize)], b: &[(usize, usize)], tol: usize) -> f64 {
        if a.is_empty() {
            return 1.0;
        }
        let hit = a
            .iter()
            .filter(|p| b.iter().any(|q| p.0.abs_diff(q.0).max(p.1.abs_diff(q.1)) <= tol))
            .count();
        hit as f64 / a.len() as f64
    }

    fn co_oracle(l: &LabelMap) -> f64 {
        let mut total = 0.0;
        for lab in 0..=l.max_label().unwrap() {
            let pix: Vec<(usize, usize)> =
                (0..l.len()).filter(|&i| l.labels[i] == lab).map(|i| (i % l.width, i / l.width)).collect();
            if pix.is_empty() {
                continue;
            }
            let mut per = 0usize;
            for &(x, y) in &pix {
                for (dx, dy) in [(1isize, 0isize), (-1, 0), (0, 1), (0, -1)] {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    let inside = nx >= 0 && ny >= 0 && (nx as usize) < l.width && (ny as usize) < l.height;
                    if !inside || l.get(nx as usize, ny as usize) != lab {
                        per += 1;
                    }
                }
            }
            let a = pix.len() as f64;
            total += a / l.len() as f64 * (4.0 * std::f64::consts::PI * a / (per * per) as f64).min(1.0);
        }
        total
    }

    #[test]
    fn asa_closed_forms() {
        let g = LabelMap::from_fn(4, 4, |x, _| (x / 2) as u32);
        assert_eq!(asa(&g, &g).unwrap(), 1.0);
        assert_eq!(asa(&LabelMap::from_fn(4, 4, |_, _| 0), &g).unwrap(), 0.5);
        assert!(asa(&LabelMap::from_fn(3, 4, |_, _| 0), &g).is_err());
    }

    #[test]
    fn asa_matches_contingency_oracle_and_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = random_map(8, 8, 6, &mut rng);
            let g = random_map(8, 8, 4, &mut rng);
            assert_eq!(asa(&p, &g).unwrap(), asa_oracle(&p, &g));
            let permuted = LabelMap { labels: p.labels.iter().map(|l| 100 - l).collect(), ..p.clone() };
            assert_eq!(asa(&permuted, &g).unwrap(), asa(&p, &g).unwrap());
        }
    }

    #[test]
    fn refinement_has_perfect_asa() {
        let g = LabelMap::from_fn(12, 12, |x, y| (x / 6 + 2 * (y / 6)) as u32);
        let refined = LabelMap::from_fn(12, 12, |x, y| (x / 3 + 4 * (y / 2)) as u32);
        assert_eq!(asa(&refined, &g).unwrap(), 1.0);
    }

    #[test]
    fn tolerance_rule() {
        assert_eq!(boundary_tolerance(321, 481), 1);
        assert_eq!(boundary_tolerance(64, 64), 0);
        assert_eq!(boundary_tolerance(2000, 2000), 7);
    }

    #[test]
    fn shifted_boundary() {
        let g = LabelMap::from_fn(10, 6, |x, _| (x >= 5) as u32);
        let p = LabelMap::from_fn(10, 6, |x, _| (x >= 6) as u32);
        let one = boundary_recall_precision(&p, &g, 1).unwrap();
        assert_eq!((one.recall, one.precision), (1.0, 1.0));
        let zero = boundary_recall_precision(&p, &g, 0).unwrap();
        assert!(zero.recall < 1.0 && zero.precision < 1.0);
        let same = boundary_recall_precision(&g, &g, 0).unwrap();
        assert_eq!((same.recall, same.precision), (1.0, 1.0));
    }

    #[test]
    fn empty_ground_truth_boundary_is_flagged() {
        let g = LabelMap::from_fn(5, 5, |_, _| 0);
        let p = LabelMap::from_fn(5, 5, |x, _| x as u32);
        let b = boundary_recall_precision(&p, &g, 1).unwrap();
        assert!(b.gt_empty && !b.pred_empty);
        assert_eq!((b.recall, b.precision), (1.0, 0.0));
    }

    #[test]
    fn boundary_scores_match_oracle_and_grow_with_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let p = random_map(16, 16, 3, &mut rng);
            let g = LabelMap::from_fn(16, 16, |x, y| ((x + rng.random_range(0..3)) / 5 + 4 * (y / 7)) as u32);
            let (pb, gb) = (boundary_oracle(&p), boundary_oracle(&g));
            let mut last = (0.0, 0.0);
            for tol in 0..4 {
                let s = boundary_recall_precision(&p, &g, tol).unwrap();
                assert_eq!(s.recall, match_oracle(&gb, &pb, tol));
                assert_eq!(s.precision, match_oracle(&pb, &gb, tol));
                assert!(s.recall >= last.0 && s.precision >= last.1);
                last = (s.recall, s.precision);
            }
        }
    }

    #[test]
    fn compactness_of_squares() {
        let quarter = std::f64::consts::FRAC_PI_4;
        assert!((compactness(&LabelMap::from_fn(6, 6, |_, _| 0)) - quarter).abs() < 1e-12);
        let tiles = LabelMap::from_fn(12, 12, |x, y| (x / 3 + 4 * (y / 3)) as u32);
        assert!((compactness(&tiles) - quarter).abs() < 1e-12);
    }

    #[test]
    fn compactness_matches_oracle_and_is_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let p = random_map(8, 8, 5, &mut rng);
            assert!((compactness(&p) - co_oracle(&p)).abs() < 1e-9);
        }
        let blob = |ox: usize| LabelMap::from_fn(12, 8, move |x, y| (x >= ox && x < ox + 3 && (2..5).contains(&y)) as u32);
        assert!((compactness(&blob(2)) - compactness(&blob(6))).abs() < 1e-12);
    }

    #[test]
    fn csv_aggregates_are_row_means() {
        let r = |asa, n| MetricReport { asa, br: 1.0, bp: 0.5, co: 0.25, n_superpixels: n, tolerance_px: 1 };
        let rep = DirectoryReport { rows: vec![("a".into(), r(0.8, 100)), ("b".into(), r(0.9, 110))], missing: vec![] };
        let all = rep.overall();
        assert!((all.asa - 0.85).abs() < 1e-12);
        assert_eq!(all.n_images, 2);
        let csv = rep.to_csv();
        assert!(csv.starts_with(CSV_HEADER));
        assert!(csv.contains("\n\nbucket,"));
        assert!(csv.contains("100,2,0.850000"));
        assert!(csv.trim_end().ends_with("all,2,0.850000,1.000000,0.500000,0.250000"));
    }
}
